#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "p2mam/corpus.hpp"
#include "p2mam/model.hpp"

namespace p2mam {

// Ordered parameter -> candidate values. The cartesian product is walked
// with the first key varying slowest.
using Grid = std::vector<std::pair<std::string, std::vector<std::string>>>;

struct TrainConfig {
  HyperParams hp;
  std::uint64_t shuffle_seed = 0;
  std::filesystem::path checkpoint_path;  // empty: no files are written
  std::size_t log_every = 0;              // steps between step log lines; 0 disables them
  Grid grid;
  std::size_t threads = 1;

  void validate() const;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean per-example loss
  std::vector<double> epoch_seconds;
  std::vector<double> valid_recall20;  // empty without a validation set
  std::optional<double> best_valid_recall20;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  std::string checkpoint_id;
};

struct TrainResult {
  ModelParams params;
  TrainReport report;
};

// Gradient reduction uses this many fixed chunks regardless of thread count.
inline constexpr std::size_t kReductionChunks = 4;

// Summed loss over data[indices]; grads receives the summed gradient.
// scratch holds per-chunk accumulators and is resized as needed.
double batch_gradient(const std::vector<FixedExample>& data, std::span<const std::size_t> indices,
                      const ModelParams& params, const HyperParams& hp, ModelParams& grads,
                      std::vector<ModelParams>& scratch, std::size_t threads = 1);

// Mini-batch Adam on the summed cross-entropy. Writes config.checkpoint_path
// at the end, and <path>.best at the best validation epoch when valid is given.
// A non-finite loss or gradient rewrites the checkpoint with the parameters
// from the start of the failing epoch and throws NumericalError.
TrainResult train(const std::vector<Example>& examples, std::size_t m, const TrainConfig& config,
                  const std::vector<Example>* valid = nullptr, std::ostream* log = nullptr);
TrainResult train(const Corpus& corpus, const TrainConfig& config, std::ostream* log = nullptr);

struct GridRow {
  std::vector<std::pair<std::string, std::string>> assignment;
  HyperParams hp;
  std::optional<double> valid_recall20;
  std::string error;
};

struct GridResult {
  HyperParams best;
  std::size_t best_index = 0;
  std::vector<GridRow> table;
  std::vector<std::string> warnings;
};

// Trains one model per grid point on the first 80% of the training sessions
// and scores recall@20 on the remaining 20%. Failed points are recorded.
GridResult grid_search(const Corpus& corpus, const TrainConfig& config);
GridResult grid_search(const std::vector<Example>& train_examples, const std::vector<Example>& valid_examples,
                       std::size_t m, const TrainConfig& config);

void write_grid_tsv(std::ostream& out, const GridResult& result);

// key=value configuration. Unknown keys and bad values throw ConfigError.
// Keys: variant d n b lr epochs batch_size seed shuffle_seed
// use_position_embeddings use_pad_mask scale log_every threads checkpoint,
// plus grid.<key> = v1,v2,... for any numeric hyperparameter key.
void apply_setting(TrainConfig& config, const std::string& key, const std::string& value);
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);
std::vector<std::pair<std::string, std::string>> parse_config_file(const std::filesystem::path& path);
// P2MAM_<KEY> environment variables, with '.' spelled '_' (P2MAM_GRID_D).
std::vector<std::pair<std::string, std::string>> environment_overrides();
std::vector<std::string> split_list(const std::string& text);

}  // namespace p2mam
