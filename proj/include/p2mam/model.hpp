#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "p2mam/corpus.hpp"
#include "p2mam/matrix.hpp"

namespace p2mam {

// Scoring variants. O scores with the position-sensitive prediction h_o, P
// with the prospective-preference-enhanced prediction h_p, OP with their
// sum. LastOP queries the multi-head attention with the last slot instead of
// h_o. Oracle conditions attention on the target item (analysis only), Mean
// pools the session uniformly, Pop ranks by in-session frequency.
enum class Variant : std::uint8_t { O = 0, P = 1, OP = 2, LastOP = 3, Oracle = 4, Mean = 5, Pop = 6 };

std::string_view variant_name(Variant v);
// Accepts the CLI spellings o|p|op|last|oracle|mean|pop (case-insensitive).
Variant parse_variant(std::string_view text);
bool has_parameters(Variant v);

enum class ScaleMode : std::uint8_t { FullD = 0, PerHead = 1 };

struct HyperParams {
  std::size_t d = 64;
  std::size_t n = 10;
  std::size_t b = 2;
  Variant variant = Variant::OP;
  bool use_position_embeddings = true;
  bool use_pad_mask = true;
  ScaleMode attention_scale_mode = ScaleMode::FullD;
  double lr = 1e-3;
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;

  // Throws ConfigError unless d, n, b >= 1 and d % b == 0.
  void validate() const;
  std::size_t head_width() const { return d / b; }
};

// V is (m+1) x d with row 0 (padding) held at zero. Each head i has
// Q[i], K[i], Wh[i] of shape d x (d/b); W is d x d.
struct ModelParams {
  Matrix V;
  Matrix P;
  Matrix q;
  std::vector<Matrix> Q;
  std::vector<Matrix> K;
  std::vector<Matrix> Wh;
  Matrix W;

  std::size_t items() const { return V.rows() == 0 ? 0 : V.rows() - 1; }

  // Canonical tensor order: V, P, q, Q_1..b, K_1..b, W_1..b, W.
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;

  static ModelParams zeros(std::size_t m, const HyperParams& hp);
  static ModelParams zeros_like(const ModelParams& other);
  void set_zero();
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Every entry uniform in [-1/sqrt(d), 1/sqrt(d)], drawn in canonical order
// from one seeded stream; V row 0 is then zeroed.
ModelParams init_params(std::size_t m, const HyperParams& hp, std::uint64_t seed);

// Throws FormatError if the tensor shapes disagree with hp or m.
void check_shapes(const ModelParams& params, const HyperParams& hp);

// Per-example intermediates. h_p and betas are present only when the
// multi-head block runs. prediction is the vector that is scored against V.
struct ForwardTrace {
  Matrix E;
  Matrix C;
  Matrix alpha;
  Matrix h_o;
  std::vector<Matrix> betas;
  std::optional<Matrix> h_p;
  Matrix prediction;
  Matrix scores;  // 1 x m; column j is item j + 1
  std::vector<bool> mask;
};

struct Embedding {
  Matrix E;
  Matrix C;
  std::vector<bool> mask;  // true at padding slots
};

struct AttentionOutput {
  Matrix alpha;
  Matrix h_o;
};

struct ProspectiveOutput {
  std::vector<Matrix> betas;
  Matrix h_p;
};

// The building blocks, evaluated without gradients. forward() and
// loss_and_gradient() run the same code on a gradient tape.
Embedding embed(const FixedExample& fixed, const ModelParams& params, const HyperParams& hp);
AttentionOutput position_sensitive_attention(const Matrix& C, const Matrix& q, const std::vector<bool>& mask,
                                             const HyperParams& hp);
ProspectiveOutput prospective_attention(const Matrix& query, const Matrix& C, const std::vector<bool>& mask,
                                        const ModelParams& params, const HyperParams& hp);
Matrix score(const Matrix& h, const Matrix& V);

ForwardTrace forward(const FixedExample& fixed, const ModelParams& params, const HyperParams& hp);

// -log scores[target] for one example. Gradients for every tensor are
// added into grads (so a batch can accumulate); V row 0 of grads is zeroed.
double loss_and_gradient(const FixedExample& fixed, const ModelParams& params, const HyperParams& hp,
                         ModelParams& grads, ForwardTrace* trace = nullptr);

// Forward-only loss, used for finite-difference checks.
double example_loss(const FixedExample& fixed, const ModelParams& params, const HyperParams& hp);

// Within-session frequency scores over all m items, normalized to sum 1.
Matrix pop_scores(const FixedExample& fixed, std::size_t m);

}  // namespace p2mam
