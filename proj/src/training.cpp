#include "p2mam/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/core.h>

#include "p2mam/adam.hpp"
#include "p2mam/checkpoint.hpp"
#include "p2mam/errors.hpp"
#include "p2mam/evaluation.hpp"
#include "p2mam/parallel.hpp"
#include "p2mam/rng.hpp"

namespace p2mam {

void TrainConfig::validate() const {
  hp.validate();
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

double batch_gradient(const std::vector<FixedExample>& data, std::span<const std::size_t> indices,
                      const ModelParams& params, const HyperParams& hp, ModelParams& grads,
                      std::vector<ModelParams>& scratch, std::size_t threads) {
  const std::size_t chunks = std::max<std::size_t>(1, std::min(kReductionChunks, indices.size()));
  if (scratch.size() < chunks || (!scratch.empty() && !scratch[0].V.same_shape(params.V))) {
    scratch.assign(chunks, ModelParams::zeros_like(params));
  }
  std::vector<double> losses(chunks, 0.0);
  for_each_chunk(indices.size(), chunks, threads, [&](std::size_t begin, std::size_t end, std::size_t c) {
    ModelParams& acc = scratch[c];
    acc.set_zero();
    double loss = 0.0;
    for (std::size_t i = begin; i < end; ++i) loss += loss_and_gradient(data[indices[i]], params, hp, acc);
    losses[c] = loss;
  });

  grads.set_zero();
  const auto out = grads.tensors();
  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    const auto part = std::as_const(scratch[c]).tensors();
    for (std::size_t t = 0; t < out.size(); ++t) *out[t] += *part[t];
    total += losses[c];
  }
  return total;
}

namespace {

std::filesystem::path best_path(const std::filesystem::path& p) {
  std::filesystem::path out = p;
  out += ".best";
  return out;
}

double recall_at_20(const std::vector<FixedExample>& examples, const ModelParams& params, const HyperParams& hp,
                    std::size_t m, std::size_t threads) {
  const auto ranks = rank_examples(examples, &params, hp, m, threads);
  std::size_t hits = 0;
  for (std::size_t r : ranks) hits += r <= 20 ? 1 : 0;
  return ranks.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(ranks.size());
}

}  // namespace

TrainResult train(const std::vector<Example>& examples, std::size_t m, const TrainConfig& config,
                  const std::vector<Example>* valid, std::ostream* log) {
  config.validate();
  const HyperParams& hp = config.hp;
  if (!has_parameters(hp.variant)) {
    throw ConfigError(fmt::format("variant {} has nothing to train", variant_name(hp.variant)));
  }
  if (examples.empty()) throw ConfigError("training set is empty");
  if (m == 0) throw ConfigError("item vocabulary is empty");

  const std::vector<FixedExample> data = to_fixed_all(examples, hp.n);
  const std::vector<FixedExample> valid_data =
      valid != nullptr ? to_fixed_all(*valid, hp.n) : std::vector<FixedExample>{};

  TrainResult result;
  result.params = init_params(m, hp, hp.seed);
  ModelParams& params = result.params;
  ModelParams grads = ModelParams::zeros_like(params);
  std::vector<ModelParams> scratch;

  const auto param_list = params.tensors();
  const auto grad_list = std::as_const(grads).tensors();
  AdamState adam(std::vector<const Matrix*>(param_list.begin(), param_list.end()), AdamOptions{hp.lr});

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffler(config.shuffle_seed);

  TrainReport& report = result.report;
  if (log != nullptr) *log << "epoch\tstep\tloss\tseconds\tvalid_recall20\n";

  using Clock = std::chrono::steady_clock;
  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    const auto start = Clock::now();
    const ModelParams last_good = params;
    shuffler.shuffle(order);
    double epoch_loss = 0.0;
    try {
      for (std::size_t begin = 0; begin < order.size(); begin += hp.batch_size) {
        const std::size_t end = std::min(order.size(), begin + hp.batch_size);
        const std::span<const std::size_t> batch(order.data() + begin, end - begin);
        const double loss = batch_gradient(data, batch, params, hp, grads, scratch, config.threads);
        if (!std::isfinite(loss)) {
          throw NumericalError(fmt::format("non-finite loss at epoch {} step {}", epoch, report.steps + 1));
        }
        adam_step(adam, param_list, grad_list);
        for (double& x : params.V.row(0)) x = 0.0;
        ++report.steps;
        epoch_loss += loss;
        if (log != nullptr && config.log_every > 0 && report.steps % config.log_every == 0) {
          *log << fmt::format("{}\t{}\t{:.6f}\t\t\n", epoch, report.steps,
                              loss / static_cast<double>(batch.size()));
        }
      }
    } catch (const NumericalError& e) {
      if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, hp, last_good);
      throw NumericalError(fmt::format("{}; training aborted{}", e.what(),
                                       config.checkpoint_path.empty()
                                           ? ""
                                           : ", last good checkpoint kept at " + config.checkpoint_path.string()));
    }
    const double mean_loss = epoch_loss / static_cast<double>(data.size());
    report.epoch_loss.push_back(mean_loss);

    std::string valid_text;
    if (!valid_data.empty()) {
      const double r20 = recall_at_20(valid_data, params, hp, m, config.threads);
      report.valid_recall20.push_back(r20);
      valid_text = fmt::format("{:.6f}", r20);
      if (!report.best_valid_recall20 || r20 > *report.best_valid_recall20) {
        report.best_valid_recall20 = r20;
        report.best_epoch = epoch;
        if (!config.checkpoint_path.empty()) save_checkpoint(best_path(config.checkpoint_path), hp, params);
      }
    }
    report.epoch_seconds.push_back(std::chrono::duration<double>(Clock::now() - start).count());
    if (log != nullptr) {
      *log << fmt::format("{}\t{}\t{:.6f}\t{:.3f}\t{}\n", epoch, report.steps, mean_loss,
                          report.epoch_seconds.back(), valid_text);
    }
  }

  const std::string bytes = encode_checkpoint(CheckpointHeader::from(hp, m), params);
  report.checkpoint_id = checkpoint_id(bytes);
  if (!config.checkpoint_path.empty()) {
    std::ofstream out(config.checkpoint_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write checkpoint '{}'", config.checkpoint_path.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (log != nullptr) {
    *log << fmt::format("# summary epochs={} steps={} final_loss={:.6f} checkpoint={}", report.epoch_loss.size(),
                        report.steps, report.epoch_loss.back(), report.checkpoint_id);
    if (report.best_valid_recall20) {
      *log << fmt::format(" best_valid_recall20={:.6f} best_epoch={}", *report.best_valid_recall20,
                          report.best_epoch);
    }
    *log << '\n';
  }
  return result;
}

TrainResult train(const Corpus& corpus, const TrainConfig& config, std::ostream* log) {
  return train(corpus.train, corpus.m, config, nullptr, log);
}

namespace {

void walk_grid(const Grid& grid, std::size_t depth, std::vector<std::pair<std::string, std::string>>& current,
               std::vector<std::vector<std::pair<std::string, std::string>>>& out) {
  if (depth == grid.size()) {
    out.push_back(current);
    return;
  }
  for (const auto& value : grid[depth].second) {
    current.emplace_back(grid[depth].first, value);
    walk_grid(grid, depth + 1, current, out);
    current.pop_back();
  }
}

}  // namespace

GridResult grid_search(const std::vector<Example>& train_examples, const std::vector<Example>& valid_examples,
                       std::size_t m, const TrainConfig& config) {
  if (config.grid.empty()) throw ConfigError("grid search needs at least one grid.<key> entry");
  for (const auto& [key, values] : config.grid) {
    if (values.empty()) throw ConfigError(fmt::format("grid.{} has no values", key));
  }
  if (valid_examples.empty()) throw ConfigError("grid search needs a nonempty validation set");

  std::vector<std::vector<std::pair<std::string, std::string>>> points;
  std::vector<std::pair<std::string, std::string>> current;
  walk_grid(config.grid, 0, current, points);

  GridResult result;
  std::optional<double> best;
  for (const auto& assignment : points) {
    GridRow row;
    row.assignment = assignment;
    try {
      TrainConfig point = config;
      point.grid.clear();
      point.checkpoint_path.clear();
      for (const auto& [key, value] : assignment) apply_setting(point, key, value);
      point.validate();
      row.hp = point.hp;
      const TrainResult trained = train(train_examples, m, point);
      const double r20 = recall_at_20(to_fixed_all(valid_examples, point.hp.n), trained.params, point.hp, m,
                                      point.threads);
      row.valid_recall20 = r20;
      if (!best || r20 > *best) {
        best = r20;
        result.best_index = result.table.size();
      }
    } catch (const Error& e) {
      row.error = e.what();
    }
    result.table.push_back(std::move(row));
  }
  if (!best) throw NumericalError("every grid point failed to train");
  result.best = result.table[result.best_index].hp;

  // The search range is only extended by the operator; flag boundary winners.
  const GridRow& winner = result.table[result.best_index];
  for (const auto& [key, values] : config.grid) {
    if (values.size() < 2) continue;
    const auto it = std::find_if(winner.assignment.begin(), winner.assignment.end(),
                                 [&](const auto& kv) { return kv.first == key; });
    if (it->second == values.front() || it->second == values.back()) {
      result.warnings.push_back(fmt::format("best {}={} is on the boundary of its search range", key, it->second));
    }
  }
  return result;
}

GridResult grid_search(const Corpus& corpus, const TrainConfig& config) {
  if (corpus.train_sessions.size() < 2) throw ConfigError("grid search needs at least two training sessions");
  const SplitResult split = split_holdout(corpus.train_sessions, SplitRule::fraction(0.2));
  return grid_search(augment_all(split.train), augment_all(split.test), corpus.m, config);
}

void write_grid_tsv(std::ostream& out, const GridResult& result) {
  if (result.table.empty()) return;
  for (const auto& [key, value] : result.table.front().assignment) out << key << '\t';
  out << "valid_recall20\tbest\terror\n";
  for (std::size_t i = 0; i < result.table.size(); ++i) {
    const GridRow& row = result.table[i];
    for (const auto& [key, value] : row.assignment) out << value << '\t';
    out << (row.valid_recall20 ? fmt::format("{:.6f}", *row.valid_recall20) : std::string()) << '\t'
        << (i == result.best_index ? "*" : "") << '\t' << row.error << '\n';
  }
  for (const auto& w : result.warnings) out << "# warning: " << w << '\n';
}

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != value.size()) throw ConfigError(fmt::format("{}: '{}' is not a non-negative integer", key, value));
  return static_cast<std::size_t>(v);
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != value.size()) throw ConfigError(fmt::format("{}: '{}' is not a number", key, value));
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError(fmt::format("{}: '{}' is not a boolean", key, value));
}

constexpr const char* kScalarKeys[] = {"variant", "d", "n", "b", "lr", "epochs", "batch_size", "seed",
                                       "shuffle_seed", "use_position_embeddings", "use_pad_mask", "scale",
                                       "log_every", "threads", "checkpoint"};
constexpr const char* kGridKeys[] = {"d", "n", "b", "lr", "epochs", "batch_size", "seed", "variant", "scale"};

}  // namespace

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(fmt::format("empty entry in list '{}'", text));
    out.push_back(item);
  }
  return out;
}

void apply_setting(TrainConfig& config, const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  HyperParams& hp = config.hp;
  if (key.rfind("grid.", 0) == 0) {
    const std::string sub = key.substr(5);
    if (std::find(std::begin(kGridKeys), std::end(kGridKeys), sub) == std::end(kGridKeys)) {
      throw ConfigError(fmt::format("'{}' cannot be searched over", sub));
    }
    std::vector<std::string> values = split_list(value);
    // Validate every candidate eagerly so typos fail before any training.
    for (const auto& v : values) {
      TrainConfig probe = config;
      apply_setting(probe, sub, v);
    }
    auto it = std::find_if(config.grid.begin(), config.grid.end(), [&](const auto& kv) { return kv.first == sub; });
    if (it != config.grid.end()) {
      it->second = std::move(values);
    } else {
      config.grid.emplace_back(sub, std::move(values));
    }
    return;
  }
  if (key == "variant") hp.variant = parse_variant(value);
  else if (key == "d") hp.d = parse_size(key, value);
  else if (key == "n") hp.n = parse_size(key, value);
  else if (key == "b") hp.b = parse_size(key, value);
  else if (key == "lr") hp.lr = parse_double(key, value);
  else if (key == "epochs") hp.epochs = parse_size(key, value);
  else if (key == "batch_size") hp.batch_size = parse_size(key, value);
  else if (key == "seed") hp.seed = parse_size(key, value);
  else if (key == "shuffle_seed") config.shuffle_seed = parse_size(key, value);
  else if (key == "use_position_embeddings") hp.use_position_embeddings = parse_bool(key, value);
  else if (key == "use_pad_mask") hp.use_pad_mask = parse_bool(key, value);
  else if (key == "scale") {
    if (value == "full-d" || value == "full_d") hp.attention_scale_mode = ScaleMode::FullD;
    else if (value == "per-head" || value == "per_head") hp.attention_scale_mode = ScaleMode::PerHead;
    else throw ConfigError(fmt::format("scale: '{}' (expected full-d|per-head)", value));
  } else if (key == "log_every") config.log_every = parse_size(key, value);
  else if (key == "threads") config.threads = parse_size(key, value);
  else if (key == "checkpoint") config.checkpoint_path = value;
  else throw ConfigError(fmt::format("unknown configuration key '{}'", key));
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("config line {}: expected key=value", line_no));
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError(fmt::format("config line {}: empty key", line_no));
    out.emplace_back(key, trim(t.substr(eq + 1)));
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read config '{}'", path.string()));
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str());
}

std::vector<std::pair<std::string, std::string>> environment_overrides() {
  std::vector<std::pair<std::string, std::string>> out;
  const auto lookup = [&](const std::string& key) {
    std::string name = "P2MAM_";
    for (char c : key) name.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    if (const char* v = std::getenv(name.c_str())) out.emplace_back(key, v);
  };
  for (const char* k : kScalarKeys) lookup(k);
  for (const char* k : kGridKeys) lookup(std::string("grid.") + k);
  return out;
}

}  // namespace p2mam
