#include "p2mam/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <fmt/core.h>

#include "p2mam/autodiff.hpp"
#include "p2mam/errors.hpp"
#include "p2mam/rng.hpp"

namespace p2mam {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::O: return "o";
    case Variant::P: return "p";
    case Variant::OP: return "op";
    case Variant::LastOP: return "last";
    case Variant::Oracle: return "oracle";
    case Variant::Mean: return "mean";
    case Variant::Pop: return "pop";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (Variant v : {Variant::O, Variant::P, Variant::OP, Variant::LastOP, Variant::Oracle, Variant::Mean,
                    Variant::Pop}) {
    if (lower == variant_name(v)) return v;
  }
  if (lower == "o-p" || lower == "last-o-p") return lower == "o-p" ? Variant::OP : Variant::LastOP;
  throw ConfigError(fmt::format("unknown variant '{}' (expected o|p|op|last|oracle|mean|pop)", text));
}

bool has_parameters(Variant v) { return v != Variant::Pop; }

void HyperParams::validate() const {
  if (d < 1 || n < 1 || b < 1) throw ConfigError("d, n and b must all be >= 1");
  if (d % b != 0) throw ConfigError(fmt::format("d = {} is not divisible by b = {}", d, b));
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
}

std::vector<Matrix*> ModelParams::tensors() {
  std::vector<Matrix*> out{&V, &P, &q};
  for (auto* group : {&Q, &K, &Wh})
    for (auto& m : *group) out.push_back(&m);
  out.push_back(&W);
  return out;
}

std::vector<const Matrix*> ModelParams::tensors() const {
  std::vector<const Matrix*> out{&V, &P, &q};
  for (const auto* group : {&Q, &K, &Wh})
    for (const auto& m : *group) out.push_back(&m);
  out.push_back(&W);
  return out;
}

ModelParams ModelParams::zeros(std::size_t m, const HyperParams& hp) {
  hp.validate();
  ModelParams p;
  p.V = Matrix(m + 1, hp.d);
  p.P = Matrix(hp.n, hp.d);
  p.q = Matrix(1, hp.d);
  for (std::size_t i = 0; i < hp.b; ++i) {
    p.Q.emplace_back(hp.d, hp.head_width());
    p.K.emplace_back(hp.d, hp.head_width());
    p.Wh.emplace_back(hp.d, hp.head_width());
  }
  p.W = Matrix(hp.d, hp.d);
  return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
  ModelParams p = other;
  p.set_zero();
  return p;
}

void ModelParams::set_zero() {
  for (Matrix* t : tensors()) t->fill(0.0);
}

ModelParams init_params(std::size_t m, const HyperParams& hp, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(m, hp);
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hp.d));
  for (Matrix* t : p.tensors())
    for (double& x : t->values()) x = rng.uniform(-bound, bound);
  for (double& x : p.V.row(0)) x = 0.0;
  return p;
}

void check_shapes(const ModelParams& params, const HyperParams& hp) {
  hp.validate();
  const ModelParams expected = ModelParams::zeros(params.items(), hp);
  const auto have = params.tensors();
  const auto want = expected.tensors();
  if (have.size() != want.size() || params.V.rows() < 2) {
    throw FormatError(fmt::format("parameter set does not match b = {}", hp.b));
  }
  for (std::size_t i = 0; i < have.size(); ++i) {
    if (!have[i]->same_shape(*want[i])) {
      throw FormatError(fmt::format("tensor {} is {}x{}, expected {}x{}", i, have[i]->rows(), have[i]->cols(),
                                    want[i]->rows(), want[i]->cols()));
    }
  }
}

namespace {

using ad::Tape;
using ad::Var;

struct ParamVars {
  Var V, P, q, W;
  std::vector<Var> Q, K, Wh;
};

// Registers the parameters as tape leaves. With grads non-null each leaf
// accumulates straight into the matching gradient tensor. P is left out
// of the parameter set when position embeddings are disabled.
ParamVars register_params(Tape& t, const ModelParams& p, const HyperParams& hp, ModelParams* grads) {
  const auto sink = [&](Matrix ModelParams::*member) -> Matrix* {
    return grads == nullptr ? nullptr : &(grads->*member);
  };
  ParamVars v;
  v.V = t.parameter(p.V, sink(&ModelParams::V));
  v.P = t.parameter(p.P, hp.use_position_embeddings ? sink(&ModelParams::P) : nullptr);
  v.q = t.parameter(p.q, sink(&ModelParams::q));
  v.W = t.parameter(p.W, sink(&ModelParams::W));
  for (std::size_t i = 0; i < p.Q.size(); ++i) {
    v.Q.push_back(t.parameter(p.Q[i], grads ? &grads->Q[i] : nullptr));
    v.K.push_back(t.parameter(p.K[i], grads ? &grads->K[i] : nullptr));
    v.Wh.push_back(t.parameter(p.Wh[i], grads ? &grads->Wh[i] : nullptr));
  }
  return v;
}

std::vector<bool> softmax_mask(const std::vector<bool>& pads, const HyperParams& hp) {
  return hp.use_pad_mask ? pads : std::vector<bool>{};
}

double sqrt_d(const HyperParams& hp) { return std::sqrt(static_cast<double>(hp.d)); }

struct EmbedVars {
  Var E, C;
  std::vector<bool> pads;
};

EmbedVars embed_graph(Tape& t, const ParamVars& pv, const FixedExample& fixed, const HyperParams& hp,
                      std::size_t m) {
  if (fixed.slots.size() != hp.n) {
    throw FormatError(fmt::format("example has {} slots, model expects n = {}", fixed.slots.size(), hp.n));
  }
  std::vector<std::size_t> rows(fixed.slots.size());
  EmbedVars out;
  out.pads.resize(fixed.slots.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (fixed.slots[i] > m) throw FormatError(fmt::format("item {} outside vocabulary of {}", fixed.slots[i], m));
    rows[i] = fixed.slots[i];
    out.pads[i] = fixed.slots[i] == kPadItem;
  }
  if (std::all_of(out.pads.begin(), out.pads.end(), [](bool b) { return b; })) {
    throw FormatError("example has no items");
  }
  out.E = ad::gather_rows(t, pv.V, rows);
  out.C = hp.use_position_embeddings ? ad::add(t, out.E, pv.P) : out.E;
  return out;
}

struct PsVars {
  Var alpha, h_o;
};

PsVars ps_graph(Tape& t, Var C, Var q, const std::vector<bool>& pads, const HyperParams& hp) {
  PsVars out;
  Var logits = ad::matmul_nt(t, q, C);
  out.alpha = ad::masked_softmax(t, logits, softmax_mask(pads, hp), sqrt_d(hp));
  out.h_o = ad::matmul(t, out.alpha, C);
  return out;
}

struct P2eVars {
  std::vector<Var> betas;
  Var h_p;
};

P2eVars p2e_graph(Tape& t, Var query, Var C, const std::vector<bool>& pads, const ParamVars& pv,
                  const HyperParams& hp) {
  const double scale = hp.attention_scale_mode == ScaleMode::FullD
                           ? sqrt_d(hp)
                           : std::sqrt(static_cast<double>(hp.head_width()));
  const auto mask = softmax_mask(pads, hp);
  P2eVars out;
  std::vector<Var> heads;
  for (std::size_t i = 0; i < pv.Q.size(); ++i) {
    Var qh = ad::matmul(t, query, pv.Q[i]);
    Var kh = ad::matmul(t, C, pv.K[i]);
    Var beta = ad::masked_softmax(t, ad::matmul_nt(t, qh, kh), mask, scale);
    Var vh = ad::matmul(t, C, pv.Wh[i]);
    heads.push_back(ad::matmul(t, beta, vh));
    out.betas.push_back(beta);
  }
  out.h_p = ad::matmul(t, ad::concat_cols(t, heads), pv.W);
  return out;
}

Var score_graph(Tape& t, Var h, Var V) { return ad::matmul_nt(t, h, V, 1); }

struct Graph {
  Var E, C, alpha, h_o, prediction, logits;
  std::optional<Var> h_p;
  std::vector<Var> betas;
  std::vector<bool> pads;
};

Graph build_graph(Tape& t, const FixedExample& fixed, const ModelParams& params, const HyperParams& hp,
                  ModelParams* grads) {
  if (hp.variant == Variant::Pop) throw ConfigError("pop has no learnable model graph");
  const std::size_t m = params.items();
  const ParamVars pv = register_params(t, params, hp, grads);
  EmbedVars ev = embed_graph(t, pv, fixed, hp, m);

  Graph g;
  g.E = ev.E;
  g.C = ev.C;
  g.pads = std::move(ev.pads);

  switch (hp.variant) {
    case Variant::O:
    case Variant::P:
    case Variant::OP:
    case Variant::LastOP: {
      const PsVars ps = ps_graph(t, g.C, pv.q, g.pads, hp);
      g.alpha = ps.alpha;
      g.h_o = ps.h_o;
      if (hp.variant == Variant::O) {
        g.prediction = g.h_o;
        break;
      }
      const Var query = hp.variant == Variant::LastOP ? ad::row(t, g.C, hp.n - 1) : g.h_o;
      const P2eVars p2e = p2e_graph(t, query, g.C, g.pads, pv, hp);
      g.betas = p2e.betas;
      g.h_p = p2e.h_p;
      g.prediction = hp.variant == Variant::P ? p2e.h_p : ad::add(t, g.h_o, p2e.h_p);
      break;
    }
    case Variant::Oracle: {
      if (fixed.target == kPadItem || fixed.target > m) {
        throw ConfigError(fmt::format("oracle needs a target in 1..{}, got {}", m, fixed.target));
      }
      const std::size_t target_row[] = {fixed.target};
      const Var query = ad::gather_rows(t, pv.V, target_row);
      const PsVars ps = ps_graph(t, g.E, query, g.pads, hp);
      g.alpha = ps.alpha;
      g.h_o = ps.h_o;
      g.prediction = g.h_o;
      break;
    }
    case Variant::Mean: {
      const std::size_t items = static_cast<std::size_t>(std::count(g.pads.begin(), g.pads.end(), false));
      Matrix weights(1, hp.n);
      for (std::size_t i = 0; i < hp.n; ++i) weights[i] = g.pads[i] ? 0.0 : 1.0 / static_cast<double>(items);
      g.alpha = t.constant(std::move(weights));
      g.h_o = ad::matmul(t, g.alpha, g.E);
      g.prediction = g.h_o;
      break;
    }
    case Variant::Pop: break;
  }
  g.logits = score_graph(t, g.prediction, pv.V);
  return g;
}

void fill_trace(const Tape& t, const Graph& g, Matrix scores, ForwardTrace& trace) {
  trace.E = t.value(g.E);
  trace.C = t.value(g.C);
  trace.alpha = t.value(g.alpha);
  trace.h_o = t.value(g.h_o);
  trace.betas.clear();
  for (Var b : g.betas) trace.betas.push_back(t.value(b));
  trace.h_p = g.h_p ? std::optional<Matrix>(t.value(*g.h_p)) : std::nullopt;
  trace.prediction = t.value(g.prediction);
  trace.scores = std::move(scores);
  trace.mask = g.pads;
}

void check_target(ItemId target, std::size_t m) {
  if (target == kPadItem || target > m) {
    throw ConfigError(fmt::format("target {} outside 1..{}", target, m));
  }
}

}  // namespace

Embedding embed(const FixedExample& fixed, const ModelParams& params, const HyperParams& hp) {
  Tape t(false);
  const ParamVars pv = register_params(t, params, hp, nullptr);
  const EmbedVars ev = embed_graph(t, pv, fixed, hp, params.items());
  return {t.value(ev.E), t.value(ev.C), ev.pads};
}

AttentionOutput position_sensitive_attention(const Matrix& C, const Matrix& q, const std::vector<bool>& mask,
                                             const HyperParams& hp) {
  Tape t(false);
  const PsVars ps = ps_graph(t, t.parameter(C, nullptr), t.parameter(q, nullptr), mask, hp);
  return {t.value(ps.alpha), t.value(ps.h_o)};
}

ProspectiveOutput prospective_attention(const Matrix& query, const Matrix& C, const std::vector<bool>& mask,
                                        const ModelParams& params, const HyperParams& hp) {
  Tape t(false);
  const ParamVars pv = register_params(t, params, hp, nullptr);
  const P2eVars p2e = p2e_graph(t, t.parameter(query, nullptr), t.parameter(C, nullptr), mask, pv, hp);
  ProspectiveOutput out;
  for (Var b : p2e.betas) out.betas.push_back(t.value(b));
  out.h_p = t.value(p2e.h_p);
  return out;
}

Matrix score(const Matrix& h, const Matrix& V) {
  return masked_row_softmax(matmul_nt(h, V, 1), {}, 1.0);
}

Matrix pop_scores(const FixedExample& fixed, std::size_t m) {
  Matrix scores(1, m);
  double total = 0.0;
  for (ItemId item : fixed.slots) {
    if (item == kPadItem) continue;
    if (item > m) throw FormatError(fmt::format("item {} outside vocabulary of {}", item, m));
    scores[item - 1] += 1.0;
    total += 1.0;
  }
  if (total == 0.0) throw FormatError("example has no items");
  scores *= 1.0 / total;
  return scores;
}

ForwardTrace forward(const FixedExample& fixed, const ModelParams& params, const HyperParams& hp) {
  ForwardTrace trace;
  if (hp.variant == Variant::Pop) {
    trace.scores = pop_scores(fixed, params.items());
    trace.mask.resize(fixed.slots.size());
    for (std::size_t i = 0; i < fixed.slots.size(); ++i) trace.mask[i] = fixed.slots[i] == kPadItem;
    return trace;
  }
  Tape t(false);
  const Graph g = build_graph(t, fixed, params, hp, nullptr);
  fill_trace(t, g, masked_row_softmax(t.value(g.logits), {}, 1.0), trace);
  return trace;
}

double loss_and_gradient(const FixedExample& fixed, const ModelParams& params, const HyperParams& hp,
                         ModelParams& grads, ForwardTrace* trace) {
  check_target(fixed.target, params.items());
  Tape t(true);
  const Graph g = build_graph(t, fixed, params, hp, &grads);
  Matrix probs;
  const Var loss = ad::softmax_cross_entropy(t, g.logits, fixed.target - 1, &probs);
  const double value = t.value(loss)[0];
  t.backward(loss);
  for (double& x : grads.V.row(0)) x = 0.0;
  if (trace != nullptr) fill_trace(t, g, std::move(probs), *trace);
  return value;
}

double example_loss(const FixedExample& fixed, const ModelParams& params, const HyperParams& hp) {
  check_target(fixed.target, params.items());
  const ForwardTrace trace = forward(fixed, params, hp);
  return cross_entropy(trace.scores, fixed.target - 1);
}

}  // namespace p2mam
