#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "p2mam/corpus.hpp"
#include "p2mam/model.hpp"

namespace p2mam {

// 1-based rank of target among scores (column j is item j + 1). Higher
// scores rank first; equal scores rank by ascending ItemId.
std::size_t rank_of_target(std::span<const double> scores, ItemId target);

struct RankMetrics {
  double recall = 0.0;
  double mrr = 0.0;
  double ndcg = 0.0;
};

// Single relevant item, so the ideal DCG is 1.
RankMetrics metrics_at_k(std::size_t rank, std::size_t k);

struct CutoffMetrics {
  std::size_t k = 0;
  double recall = 0.0;
  double mrr = 0.0;
  double ndcg = 0.0;
  // Per-example values in example order, for paired tests.
  std::vector<double> recall_each;
  std::vector<double> mrr_each;
  std::vector<double> ndcg_each;
};

struct MetricsReport {
  std::vector<CutoffMetrics> cutoffs;
  std::vector<std::size_t> ranks;
  std::size_t count = 0;

  const CutoffMetrics& at(std::size_t k) const;
};

MetricsReport metrics_from_ranks(std::vector<std::size_t> ranks, std::span<const std::size_t> ks);

// Ranks every example's target under the model (params may be null for pop).
// Examples are split into contiguous chunks across threads and merged in order.
std::vector<std::size_t> rank_examples(const std::vector<FixedExample>& examples, const ModelParams* params,
                                       const HyperParams& hp, std::size_t m, std::size_t threads = 1);

MetricsReport evaluate(const std::vector<Example>& examples, const ModelParams* params, const HyperParams& hp,
                       std::size_t m, std::span<const std::size_t> ks, std::size_t threads = 1);

inline constexpr std::size_t kDefaultCutoffs[] = {5, 10, 20};

struct TTestResult {
  double t = 0.0;
  double p_value = 1.0;
  std::size_t df = 0;
  bool significant = false;
  // Zero variance with a nonzero mean difference: t is reported as +/-inf.
  bool infinite = false;
};

// Two-sided paired t-test on a - b at the given level (0.05 for 95%).
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b, double alpha = 0.05);

struct CosineReport {
  double avg_all = 0.0;
  double avg_next = 0.0;
  std::size_t examples = 0;
  std::size_t skipped_pairs = 0;
};

// Cosine similarity between each example's prediction vector and every
// item embedding (averaged), and with the target's embedding.
CosineReport cosine_analysis(const ModelParams& params, const HyperParams& hp, const std::vector<Example>& examples);

// Mean position-sensitive attention over the last l slots, grouped by
// prefix length l = 1..max_len. Prefixes longer than max_len or n are left out.
struct AttentionTable {
  std::size_t max_len = 8;
  std::vector<std::vector<double>> rows;  // rows[l-1] has l entries, empty if unpopulated
  std::vector<std::size_t> counts;
};

AttentionTable attention_trace_export(const ModelParams& params, const HyperParams& hp,
                                      const std::vector<Example>& examples, std::size_t max_len = 8);

struct BenchReport {
  double mean_ms = 0.0;
  double p95_ms = 0.0;
  double examples_per_second = 0.0;
  std::size_t timed = 0;
};

// Single-threaded forward-only scoring latency. One untimed warm-up pass.
BenchReport bench_inference(const ModelParams* params, const HyperParams& hp, std::size_t m,
                            const std::vector<Example>& examples, std::size_t repetitions);

// Tab-separated report writers.
void write_metrics_tsv(std::ostream& out, const std::string& variant_label, const MetricsReport& report);
void write_cosine_tsv(std::ostream& out, const std::string& variant_label, const CosineReport& report);
void write_bench_tsv(std::ostream& out, const std::string& variant_label, const BenchReport& report);
void write_attention_csv(std::ostream& out, const AttentionTable& table);

}  // namespace p2mam
