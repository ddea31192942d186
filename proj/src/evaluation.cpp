#include "p2mam/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include <boost/math/distributions/students_t.hpp>
#include <fmt/core.h>

#include "p2mam/errors.hpp"
#include "p2mam/parallel.hpp"

namespace p2mam {

std::size_t rank_of_target(std::span<const double> scores, ItemId target) {
  if (target == kPadItem || target > scores.size()) {
    throw ConfigError(fmt::format("target {} outside 1..{}", target, scores.size()));
  }
  const std::size_t t = target - 1;
  const double s = scores[t];
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > s || (scores[j] == s && j < t)) ++ahead;
  }
  return ahead + 1;
}

RankMetrics metrics_at_k(std::size_t rank, std::size_t k) {
  if (rank < 1 || k < 1) throw ConfigError("rank and k must be >= 1");
  if (rank > k) return {};
  const double r = static_cast<double>(rank);
  return {1.0, 1.0 / r, 1.0 / std::log2(r + 1.0)};
}

const CutoffMetrics& MetricsReport::at(std::size_t k) const {
  for (const auto& c : cutoffs)
    if (c.k == k) return c;
  throw ConfigError(fmt::format("report has no cutoff {}", k));
}

MetricsReport metrics_from_ranks(std::vector<std::size_t> ranks, std::span<const std::size_t> ks) {
  MetricsReport report;
  report.count = ranks.size();
  for (std::size_t k : ks) {
    CutoffMetrics c;
    c.k = k;
    c.recall_each.reserve(ranks.size());
    c.mrr_each.reserve(ranks.size());
    c.ndcg_each.reserve(ranks.size());
    for (std::size_t r : ranks) {
      const RankMetrics m = metrics_at_k(r, k);
      c.recall_each.push_back(m.recall);
      c.mrr_each.push_back(m.mrr);
      c.ndcg_each.push_back(m.ndcg);
      c.recall += m.recall;
      c.mrr += m.mrr;
      c.ndcg += m.ndcg;
    }
    if (!ranks.empty()) {
      const double n = static_cast<double>(ranks.size());
      c.recall /= n;
      c.mrr /= n;
      c.ndcg /= n;
    }
    report.cutoffs.push_back(std::move(c));
  }
  report.ranks = std::move(ranks);
  return report;
}

std::vector<std::size_t> rank_examples(const std::vector<FixedExample>& examples, const ModelParams* params,
                                       const HyperParams& hp, std::size_t m, std::size_t threads) {
  if (has_parameters(hp.variant) && params == nullptr) {
    throw ConfigError(fmt::format("variant {} needs model parameters", variant_name(hp.variant)));
  }
  std::vector<std::size_t> ranks(examples.size());
  const ModelParams empty;
  const ModelParams& p = params != nullptr ? *params : empty;
  for_each_chunk(examples.size(), threads, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t i = begin; i < end; ++i) {
      const Matrix scores =
          hp.variant == Variant::Pop ? pop_scores(examples[i], m) : forward(examples[i], p, hp).scores;
      ranks[i] = rank_of_target(scores.values(), examples[i].target);
    }
  });
  return ranks;
}

MetricsReport evaluate(const std::vector<Example>& examples, const ModelParams* params, const HyperParams& hp,
                       std::size_t m, std::span<const std::size_t> ks, std::size_t threads) {
  return metrics_from_ranks(rank_examples(to_fixed_all(examples, hp.n), params, hp, m, threads), ks);
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b, double alpha) {
  if (a.size() != b.size()) {
    throw ConfigError(fmt::format("paired t-test: {} vs {} values", a.size(), b.size()));
  }
  if (a.size() < 2) throw ConfigError("paired t-test needs at least two pairs");
  const std::size_t n = a.size();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dev = (a[i] - b[i]) - mean;
    ss += dev * dev;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  TTestResult r;
  r.df = n - 1;
  if (sd == 0.0) {
    if (mean == 0.0) return r;
    r.infinite = true;
    r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p_value = 0.0;
    r.significant = true;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(r.df));
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  r.significant = r.p_value < alpha;
  return r;
}

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_learned(const HyperParams& hp, const char* what) {
  if (!has_parameters(hp.variant)) {
    throw ConfigError(fmt::format("{} needs a learned variant, not {}", what, variant_name(hp.variant)));
  }
}

}  // namespace

CosineReport cosine_analysis(const ModelParams& params, const HyperParams& hp, const std::vector<Example>& examples) {
  require_learned(hp, "cosine analysis");
  const std::size_t m = params.items();
  std::vector<double> item_norm(m + 1);
  for (std::size_t j = 1; j <= m; ++j) item_norm[j] = norm(params.V.row(j));

  CosineReport report;
  double sum_all = 0.0;
  double sum_next = 0.0;
  std::size_t next_count = 0;
  for (const Example& e : examples) {
    const ForwardTrace trace = forward(to_fixed(e, hp.n), params, hp);
    const auto pred = trace.prediction.values();
    const double pn = norm(pred);
    if (pn == 0.0) {
      report.skipped_pairs += m + 1;
      continue;
    }
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t j = 1; j <= m; ++j) {
      if (item_norm[j] == 0.0) {
        ++report.skipped_pairs;
        continue;
      }
      total += dot(pred, params.V.row(j)) / (pn * item_norm[j]);
      ++used;
    }
    if (used > 0) {
      sum_all += total / static_cast<double>(used);
      ++report.examples;
    }
    if (item_norm[e.target] == 0.0) {
      ++report.skipped_pairs;
    } else {
      sum_next += dot(pred, params.V.row(e.target)) / (pn * item_norm[e.target]);
      ++next_count;
    }
  }
  if (report.examples > 0) report.avg_all = sum_all / static_cast<double>(report.examples);
  if (next_count > 0) report.avg_next = sum_next / static_cast<double>(next_count);
  return report;
}

AttentionTable attention_trace_export(const ModelParams& params, const HyperParams& hp,
                                      const std::vector<Example>& examples, std::size_t max_len) {
  require_learned(hp, "attention export");
  AttentionTable table;
  table.max_len = max_len;
  table.rows.assign(max_len, {});
  table.counts.assign(max_len, 0);
  const std::size_t longest = std::min(max_len, hp.n);
  for (const Example& e : examples) {
    const std::size_t len = e.input.size();
    if (len < 1 || len > longest) continue;
    const ForwardTrace trace = forward(to_fixed(e, hp.n), params, hp);
    auto& row = table.rows[len - 1];
    if (row.empty()) row.assign(len, 0.0);
    for (std::size_t i = 0; i < len; ++i) row[i] += trace.alpha[hp.n - len + i];
    ++table.counts[len - 1];
  }
  for (std::size_t l = 0; l < max_len; ++l) {
    if (table.counts[l] == 0) continue;
    for (double& x : table.rows[l]) x /= static_cast<double>(table.counts[l]);
  }
  return table;
}

BenchReport bench_inference(const ModelParams* params, const HyperParams& hp, std::size_t m,
                            const std::vector<Example>& examples, std::size_t repetitions) {
  if (examples.empty()) throw ConfigError("bench_inference: no examples");
  if (repetitions < 1) throw ConfigError("bench_inference: repetitions must be >= 1");
  if (has_parameters(hp.variant) && params == nullptr) throw ConfigError("bench_inference: missing parameters");
  const std::vector<FixedExample> fixed = to_fixed_all(examples, hp.n);
  const ModelParams empty;
  const ModelParams& p = params != nullptr ? *params : empty;
  double sink = 0.0;
  const auto run = [&](const FixedExample& fx) {
    const Matrix scores = hp.variant == Variant::Pop ? pop_scores(fx, m) : forward(fx, p, hp).scores;
    sink += scores[0];
  };
  for (const auto& fx : fixed) run(fx);

  using Clock = std::chrono::steady_clock;
  std::vector<double> latencies;
  latencies.reserve(fixed.size() * repetitions);
  double total_ms = 0.0;
  for (std::size_t r = 0; r < repetitions; ++r) {
    for (const auto& fx : fixed) {
      const auto start = Clock::now();
      run(fx);
      const double ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
      latencies.push_back(ms);
      total_ms += ms;
    }
  }
  volatile double keep = sink;
  (void)keep;

  BenchReport report;
  report.timed = latencies.size();
  report.mean_ms = total_ms / static_cast<double>(latencies.size());
  std::sort(latencies.begin(), latencies.end());
  const auto p95_index = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(latencies.size()))) - 1;
  report.p95_ms = latencies[std::min(p95_index, latencies.size() - 1)];
  report.examples_per_second = total_ms > 0.0 ? 1000.0 * static_cast<double>(latencies.size()) / total_ms : 0.0;
  return report;
}

void write_metrics_tsv(std::ostream& out, const std::string& variant_label, const MetricsReport& report) {
  out << "variant\tk\trecall\tmrr\tndcg\tN\n";
  for (const auto& c : report.cutoffs) {
    out << fmt::format("{}\t{}\t{:.6f}\t{:.6f}\t{:.6f}\t{}\n", variant_label, c.k, c.recall, c.mrr, c.ndcg,
                       report.count);
  }
}

void write_cosine_tsv(std::ostream& out, const std::string& variant_label, const CosineReport& report) {
  out << "variant\tavg\tnext\n";
  out << fmt::format("{}\t{:.6f}\t{:.6f}\n", variant_label, report.avg_all, report.avg_next);
}

void write_bench_tsv(std::ostream& out, const std::string& variant_label, const BenchReport& report) {
  out << "variant\tmean_ms\tp95_ms\teps\n";
  out << fmt::format("{}\t{:.6f}\t{:.6f}\t{:.1f}\n", variant_label, report.mean_ms, report.p95_ms,
                     report.examples_per_second);
}

void write_attention_csv(std::ostream& out, const AttentionTable& table) {
  out << "length";
  for (std::size_t i = 1; i <= table.max_len; ++i) out << ",pos_" << i;
  out << '\n';
  for (std::size_t l = 1; l <= table.max_len; ++l) {
    out << l;
    const auto& row = table.rows[l - 1];
    for (std::size_t i = 0; i < table.max_len; ++i) {
      out << ',';
      if (i < row.size()) out << fmt::format("{:.6f}", row[i]);
    }
    out << '\n';
  }
}

}  // namespace p2mam
