#include "p2mam/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/core.h>

#include "p2mam/errors.hpp"

namespace p2mam {

ItemId Vocabulary::intern(const std::string& token) {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  tokens_.push_back(token);
  const auto id = static_cast<ItemId>(tokens_.size());
  ids_.emplace(token, id);
  return id;
}

std::optional<ItemId> Vocabulary::find(const std::string& token) const {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  return std::nullopt;
}

const std::string& Vocabulary::token(ItemId id) const {
  if (id == kPadItem || id > tokens_.size()) {
    throw FormatError(fmt::format("item id {} outside vocabulary of {}", id, tokens_.size()));
  }
  return tokens_[id - 1];
}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f'; }

}  // namespace

ParseResult parse_sessions_text(const std::string& text) {
  ParseResult result;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t first = 0;
    while (first < line.size() && is_space(line[first])) ++first;
    if (first < line.size() && line[first] == '#') continue;

    RawSession session;
    std::size_t pos = first;
    while (pos < line.size()) {
      while (pos < line.size() && is_space(line[pos])) ++pos;
      if (pos >= line.size()) break;
      std::size_t end = pos;
      while (end < line.size() && !is_space(line[end])) ++end;
      std::string token = line.substr(pos, end - pos);
      // Separators collapse, so the only way to write an empty token is an
      // embedded control character (e.g. NUL) that is not a separator.
      if (std::any_of(token.begin(), token.end(),
                      [](char c) { return static_cast<unsigned char>(c) < 0x20; })) {
        throw FormatError(fmt::format("line {}: empty or malformed token", line_no));
      }
      session.push_back(std::move(token));
      pos = end;
    }
    if (session.empty()) {
      ++result.skipped_blank_lines;
      continue;
    }
    result.sessions.push_back(std::move(session));
  }
  return result;
}

ParseResult parse_sessions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read session file '{}'", path.string()));
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) throw IoError(fmt::format("error reading '{}'", path.string()));
  return parse_sessions_text(buffer.str());
}

FilterResult filter_and_index(const std::vector<RawSession>& raw, const FilterOptions& options) {
  if (options.min_item_count < 1) throw ConfigError("min_item_count must be >= 1");
  if (options.min_session_len < 2) throw ConfigError("min_session_len must be >= 2");

  std::vector<RawSession> current = raw;
  std::vector<std::size_t> source(raw.size());
  for (std::size_t i = 0; i < source.size(); ++i) source[i] = i;

  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& s : current)
      for (const auto& tok : s) ++counts[tok];

    std::vector<RawSession> next;
    std::vector<std::size_t> next_source;
    for (std::size_t i = 0; i < current.size(); ++i) {
      RawSession kept;
      for (const auto& tok : current[i]) {
        if (counts[tok] >= options.min_item_count) kept.push_back(tok);
      }
      if (kept.size() != current[i].size()) changed = true;
      if (kept.size() < options.min_session_len) {
        changed = true;
        continue;
      }
      next.push_back(std::move(kept));
      next_source.push_back(source[i]);
    }
    current = std::move(next);
    source = std::move(next_source);
  }
  if (current.empty()) throw FormatError("empty corpus: every session was removed by filtering");

  FilterResult result;
  result.source_index = std::move(source);
  result.sessions.reserve(current.size());
  for (const auto& s : current) {
    Session ids;
    ids.reserve(s.size());
    for (const auto& tok : s) ids.push_back(result.vocab.intern(tok));
    result.sessions.push_back(std::move(ids));
  }
  result.m = result.vocab.size();
  return result;
}

std::vector<Example> augment(const Session& session) {
  if (session.size() < 2) {
    throw ConfigError(fmt::format("augment: session of length {} (need >= 2)", session.size()));
  }
  std::vector<Example> out;
  out.reserve(session.size() - 1);
  for (std::size_t k = 1; k < session.size(); ++k) {
    out.push_back({Session(session.begin(), session.begin() + static_cast<std::ptrdiff_t>(k)), session[k]});
  }
  return out;
}

std::vector<Example> augment_all(const std::vector<Session>& sessions) {
  std::vector<Example> out;
  for (const auto& s : sessions) {
    auto part = augment(s);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

FixedExample to_fixed(const Example& example, std::size_t n) {
  if (n < 1) throw ConfigError("fixed length n must be >= 1");
  if (example.input.empty()) throw ConfigError("to_fixed: empty input");
  const std::size_t keep = std::min(n, example.input.size());
  FixedExample fixed;
  fixed.pad_count = n - keep;
  fixed.slots.assign(fixed.pad_count, kPadItem);
  fixed.slots.insert(fixed.slots.end(), example.input.end() - static_cast<std::ptrdiff_t>(keep),
                     example.input.end());
  fixed.target = example.target;
  return fixed;
}

std::vector<FixedExample> to_fixed_all(const std::vector<Example>& examples, std::size_t n) {
  std::vector<FixedExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(to_fixed(e, n));
  return out;
}

Example from_fixed(const FixedExample& fixed) {
  return {std::vector<ItemId>(fixed.slots.begin() + static_cast<std::ptrdiff_t>(fixed.pad_count),
                              fixed.slots.end()),
          fixed.target};
}

SplitResult split_holdout(const std::vector<Session>& sessions, const SplitRule& rule) {
  const std::size_t total = sessions.size();
  std::size_t test_count = 0;
  if (rule.cut_index) {
    if (*rule.cut_index > total) throw ConfigError("split cut index beyond the session count");
    test_count = total - *rule.cut_index;
  } else {
    if (!(rule.test_fraction > 0.0 && rule.test_fraction < 1.0)) {
      throw ConfigError(fmt::format("holdout fraction {} must be in (0, 1)", rule.test_fraction));
    }
    // The epsilon keeps products like 0.1 * 30 = 3.0000000000000004 at 3.
    test_count = static_cast<std::size_t>(
        std::ceil(rule.test_fraction * static_cast<double>(total) - 1e-9));
  }
  if (test_count == 0 || test_count >= total) {
    throw ConfigError(fmt::format("holdout leaves {} train / {} test sessions", total - test_count,
                                  test_count));
  }
  const auto cut = sessions.begin() + static_cast<std::ptrdiff_t>(total - test_count);
  return {std::vector<Session>(sessions.begin(), cut), std::vector<Session>(cut, sessions.end())};
}

namespace {

Corpus finish(FilterResult filtered, std::vector<Session> train, std::vector<Session> test) {
  Corpus corpus;
  corpus.m = filtered.m;
  corpus.vocab = std::move(filtered.vocab);
  corpus.train_sessions = std::move(train);
  corpus.test_sessions = std::move(test);
  corpus.train = augment_all(corpus.train_sessions);
  corpus.test = augment_all(corpus.test_sessions);
  return corpus;
}

}  // namespace

Corpus build_corpus(const std::vector<RawSession>& train_raw, const std::vector<RawSession>& test_raw,
                    const FilterOptions& options) {
  std::vector<RawSession> all = train_raw;
  all.insert(all.end(), test_raw.begin(), test_raw.end());
  FilterResult filtered = filter_and_index(all, options);
  std::vector<Session> train, test;
  for (std::size_t i = 0; i < filtered.sessions.size(); ++i) {
    (filtered.source_index[i] < train_raw.size() ? train : test).push_back(filtered.sessions[i]);
  }
  if (train.empty() || test.empty()) {
    throw FormatError(fmt::format("after filtering: {} train / {} test sessions", train.size(), test.size()));
  }
  return finish(std::move(filtered), std::move(train), std::move(test));
}

Corpus build_corpus(const std::vector<RawSession>& raw, const SplitRule& rule, const FilterOptions& options) {
  FilterResult filtered = filter_and_index(raw, options);
  SplitResult split = split_holdout(filtered.sessions, rule);
  return finish(std::move(filtered), std::move(split.train), std::move(split.test));
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats stats;
  stats.items = corpus.m;
  stats.train_sessions = corpus.train_sessions.size();
  stats.test_sessions = corpus.test_sessions.size();
  std::size_t total_len = 0;
  for (const auto* side : {&corpus.train_sessions, &corpus.test_sessions})
    for (const auto& s : *side) total_len += s.size();
  const std::size_t sessions = stats.train_sessions + stats.test_sessions;
  stats.avg_length = sessions == 0 ? 0.0 : static_cast<double>(total_len) / static_cast<double>(sessions);

  stats.aug_train = corpus.train.size();
  stats.aug_test = corpus.test.size();
  std::size_t aug_len = 0;
  for (const auto* side : {&corpus.train, &corpus.test})
    for (const auto& e : *side) aug_len += e.input.size() + 1;
  const std::size_t examples = stats.aug_train + stats.aug_test;
  stats.aug_avg_length = examples == 0 ? 0.0 : static_cast<double>(aug_len) / static_cast<double>(examples);
  return stats;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read '{}'", path.string()));
  return in;
}

void write_ids(std::ostream& out, const std::vector<ItemId>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out << ' ';
    out << ids[i];
  }
}

std::vector<ItemId> parse_ids(std::string_view text, std::size_t m, const std::string& where) {
  std::vector<ItemId> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && text[pos] == ' ') ++pos;
    if (pos >= text.size()) break;
    std::size_t end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    ItemId id = 0;
    auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + end, id);
    if (ec != std::errc() || ptr != text.data() + end || id == kPadItem || id > m) {
      throw FormatError(fmt::format("{}: bad item id '{}'", where, text.substr(pos, end - pos)));
    }
    ids.push_back(id);
    pos = end;
  }
  return ids;
}

void write_sessions(const std::filesystem::path& path, const std::vector<Session>& sessions) {
  auto out = open_out(path);
  for (const auto& s : sessions) {
    write_ids(out, s);
    out << '\n';
  }
}

void write_examples(const std::filesystem::path& path, const std::vector<Example>& examples) {
  auto out = open_out(path);
  for (const auto& e : examples) {
    write_ids(out, e.input);
    out << '\t' << e.target << '\n';
  }
}

std::vector<Session> read_sessions(const std::filesystem::path& path, std::size_t m) {
  auto in = open_in(path);
  std::vector<Session> sessions;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    sessions.push_back(parse_ids(line, m, path.string()));
  }
  return sessions;
}

std::vector<Example> read_examples(const std::filesystem::path& path, std::size_t m) {
  auto in = open_in(path);
  std::vector<Example> examples;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(fmt::format("{}: missing target column", path.string()));
    Example e;
    e.input = parse_ids(std::string_view(line).substr(0, tab), m, path.string());
    const auto target = parse_ids(std::string_view(line).substr(tab + 1), m, path.string());
    if (e.input.empty() || target.size() != 1) {
      throw FormatError(fmt::format("{}: malformed example line", path.string()));
    }
    e.target = target[0];
    examples.push_back(std::move(e));
  }
  return examples;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create '{}': {}", dir.string(), ec.message()));

  {
    auto out = open_out(dir / "vocab.tsv");
    for (ItemId id = 1; id <= corpus.m; ++id) out << id << '\t' << corpus.vocab.token(id) << '\n';
  }
  write_sessions(dir / "train_sessions.txt", corpus.train_sessions);
  write_sessions(dir / "test_sessions.txt", corpus.test_sessions);
  write_examples(dir / "train_examples.tsv", corpus.train);
  write_examples(dir / "test_examples.tsv", corpus.test);

  const CorpusStats s = corpus_stats(corpus);
  auto out = open_out(dir / "stats.tsv");
  out << "items\ttrain\ttest\tavg_length\taug_train\taug_test\taug_avg_length\n";
  out << fmt::format("{}\t{}\t{}\t{:.2f}\t{}\t{}\t{:.2f}\n", s.items, s.train_sessions, s.test_sessions,
                     s.avg_length, s.aug_train, s.aug_test, s.aug_avg_length);
}

Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  {
    auto in = open_in(dir / "vocab.tsv");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError("vocab.tsv: missing tab");
      const std::string id_text = line.substr(0, tab);
      const ItemId id = corpus.vocab.intern(line.substr(tab + 1));
      if (std::to_string(id) != id_text) {
        throw FormatError(fmt::format("vocab.tsv: ids must be dense and ascending (line '{}')", line));
      }
    }
  }
  corpus.m = corpus.vocab.size();
  if (corpus.m == 0) throw FormatError("vocab.tsv is empty");
  corpus.train_sessions = read_sessions(dir / "train_sessions.txt", corpus.m);
  corpus.test_sessions = read_sessions(dir / "test_sessions.txt", corpus.m);
  corpus.train = read_examples(dir / "train_examples.tsv", corpus.m);
  corpus.test = read_examples(dir / "test_examples.tsv", corpus.m);
  return corpus;
}

}  // namespace p2mam
