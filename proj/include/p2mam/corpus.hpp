#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace p2mam {

// Dense item index. 1..m are real items; 0 is the padding sentinel.
using ItemId = std::uint32_t;
inline constexpr ItemId kPadItem = 0;

using RawSession = std::vector<std::string>;
using Session = std::vector<ItemId>;

// A session prefix and the item that followed it.
struct Example {
  std::vector<ItemId> input;
  ItemId target = kPadItem;

  friend bool operator==(const Example&, const Example&) = default;
};

// The last min(n, |input|) items, left-padded with kPadItem to length n.
struct FixedExample {
  std::vector<ItemId> slots;
  std::size_t pad_count = 0;
  ItemId target = kPadItem;

  std::size_t length() const { return slots.size() - pad_count; }
  friend bool operator==(const FixedExample&, const FixedExample&) = default;
};

// Bijection between raw item tokens and ItemIds 1..m.
class Vocabulary {
 public:
  // Returns the existing id, or assigns the next one.
  ItemId intern(const std::string& token);
  std::optional<ItemId> find(const std::string& token) const;
  const std::string& token(ItemId id) const;
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<std::string> tokens_;  // tokens_[id - 1]
  std::unordered_map<std::string, ItemId> ids_;
};

struct ParseResult {
  std::vector<RawSession> sessions;
  std::size_t skipped_blank_lines = 0;
};

// One session per line; whitespace-separated tokens; '#' starts a comment line.
ParseResult parse_sessions(const std::filesystem::path& path);
ParseResult parse_sessions_text(const std::string& text);

struct FilterOptions {
  std::size_t min_item_count = 5;
  std::size_t min_session_len = 2;
};

struct FilterResult {
  std::vector<Session> sessions;
  // Index into the input of every surviving session, ascending.
  std::vector<std::size_t> source_index;
  Vocabulary vocab;
  std::size_t m = 0;
};

// Drops rare items and short sessions repeatedly until neither rule removes
// anything, then numbers the remaining tokens by first appearance. Throws
// FormatError if nothing survives.
FilterResult filter_and_index(const std::vector<RawSession>& raw, const FilterOptions& options = {});

// Every prefix of length >= 1 paired with its successor: length - 1 examples.
std::vector<Example> augment(const Session& session);
std::vector<Example> augment_all(const std::vector<Session>& sessions);

FixedExample to_fixed(const Example& example, std::size_t n);
std::vector<FixedExample> to_fixed_all(const std::vector<Example>& examples, std::size_t n);
// Inverse of to_fixed up to truncation: the non-pad slots as an Example.
Example from_fixed(const FixedExample& fixed);

// Either the trailing ceil(fraction * S) sessions, or everything from
// cut_index on, become the test side.
struct SplitRule {
  static SplitRule fraction(double f) { return {f, std::nullopt}; }
  static SplitRule cut(std::size_t index) { return {0.0, index}; }

  double test_fraction = 0.2;
  std::optional<std::size_t> cut_index;
};

struct SplitResult {
  std::vector<Session> train;
  std::vector<Session> test;
};

SplitResult split_holdout(const std::vector<Session>& sessions, const SplitRule& rule);

struct Corpus {
  std::size_t m = 0;
  Vocabulary vocab;
  std::vector<Session> train_sessions;
  std::vector<Session> test_sessions;
  std::vector<Example> train;
  std::vector<Example> test;
};

// Filters train and test jointly (so both share one vocabulary), then
// augments each side. Separate train/test inputs keep their sides.
Corpus build_corpus(const std::vector<RawSession>& train_raw, const std::vector<RawSession>& test_raw,
                    const FilterOptions& options);
// Single input split by rule after filtering.
Corpus build_corpus(const std::vector<RawSession>& raw, const SplitRule& rule, const FilterOptions& options);

// The dataset statistics table: items, sessions and mean lengths before and
// after augmentation. An augmented session's length counts its target.
struct CorpusStats {
  std::size_t items = 0;
  std::size_t train_sessions = 0;
  std::size_t test_sessions = 0;
  double avg_length = 0.0;
  std::size_t aug_train = 0;
  std::size_t aug_test = 0;
  double aug_avg_length = 0.0;
};

CorpusStats corpus_stats(const Corpus& corpus);

// Directory layout written by `prepare` and read back by every other command.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace p2mam
