#include "p2mam/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/core.h>

#include "p2mam/errors.hpp"

namespace p2mam {

namespace {

constexpr char kMagic[4] = {'P', '2', 'M', '1'};
constexpr std::uint32_t kFlagPosition = 1u << 0;
constexpr std::uint32_t kFlagPadMask = 1u << 1;
constexpr std::uint32_t kFlagPerHead = 1u << 2;
constexpr std::uint32_t kKnownFlags = kFlagPosition | kFlagPadMask | kFlagPerHead;

std::uint32_t narrow(std::size_t value, const char* what) {
  if (value > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError(fmt::format("{} = {} does not fit the checkpoint header", what, value));
  }
  return static_cast<std::uint32_t>(value);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  void magic() {
    need(4);
    if (std::memcmp(bytes_.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
    pos_ += 4;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t count) const {
    if (bytes_.size() - pos_ < count) throw FormatError("checkpoint is truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

CheckpointHeader read_header(Reader& in) {
  in.magic();
  CheckpointHeader h;
  const std::uint32_t variant = in.u32();
  if (variant > static_cast<std::uint32_t>(Variant::Pop)) {
    throw FormatError(fmt::format("checkpoint has unknown variant tag {}", variant));
  }
  h.variant = static_cast<Variant>(variant);
  h.m = in.u32();
  h.d = in.u32();
  h.n = in.u32();
  h.b = in.u32();
  const std::uint32_t flags = in.u32();
  if ((flags & ~kKnownFlags) != 0) throw FormatError(fmt::format("checkpoint has unknown flags {:#x}", flags));
  h.use_position_embeddings = (flags & kFlagPosition) != 0;
  h.use_pad_mask = (flags & kFlagPadMask) != 0;
  h.attention_scale_mode = (flags & kFlagPerHead) != 0 ? ScaleMode::PerHead : ScaleMode::FullD;
  return h;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read checkpoint '{}'", path.string()));
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace

CheckpointHeader CheckpointHeader::from(const HyperParams& hp, std::size_t m) {
  CheckpointHeader h;
  h.variant = hp.variant;
  h.m = narrow(m, "m");
  h.d = narrow(hp.d, "d");
  h.n = narrow(hp.n, "n");
  h.b = narrow(hp.b, "b");
  h.use_position_embeddings = hp.use_position_embeddings;
  h.use_pad_mask = hp.use_pad_mask;
  h.attention_scale_mode = hp.attention_scale_mode;
  return h;
}

void CheckpointHeader::apply_to(HyperParams& hp) const {
  hp.variant = variant;
  hp.d = d;
  hp.n = n;
  hp.b = b;
  hp.use_position_embeddings = use_position_embeddings;
  hp.use_pad_mask = use_pad_mask;
  hp.attention_scale_mode = attention_scale_mode;
}

std::uint32_t CheckpointHeader::flags() const {
  return (use_position_embeddings ? kFlagPosition : 0u) | (use_pad_mask ? kFlagPadMask : 0u) |
         (attention_scale_mode == ScaleMode::PerHead ? kFlagPerHead : 0u);
}

std::string encode_checkpoint(const CheckpointHeader& header, const ModelParams& params) {
  HyperParams hp;
  header.apply_to(hp);
  if (params.items() != header.m) throw FormatError("checkpoint header m disagrees with V");
  check_shapes(params, hp);

  std::string out(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(header.variant));
  for (std::uint32_t v : {header.m, header.d, header.n, header.b, header.flags()}) put_u32(out, v);
  for (const Matrix* t : params.tensors()) {
    put_u32(out, narrow(t->rows(), "rows"));
    put_u32(out, narrow(t->cols(), "cols"));
    for (double x : t->values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  Checkpoint ck;
  ck.header = read_header(in);
  HyperParams hp;
  ck.header.apply_to(hp);
  hp.validate();
  ck.params = ModelParams::zeros(ck.header.m, hp);
  std::size_t index = 0;
  for (Matrix* t : ck.params.tensors()) {
    const std::uint32_t rows = in.u32();
    const std::uint32_t cols = in.u32();
    if (rows != t->rows() || cols != t->cols()) {
      throw FormatError(fmt::format("checkpoint tensor {} is {}x{}, header implies {}x{}", index, rows, cols,
                                    t->rows(), t->cols()));
    }
    for (double& x : t->values()) x = static_cast<double>(std::bit_cast<float>(in.u32()));
    ++index;
  }
  if (!in.done()) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const HyperParams& hp, const ModelParams& params) {
  const std::string bytes = encode_checkpoint(CheckpointHeader::from(hp, params.items()), params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot write checkpoint '{}'", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(fmt::format("error writing checkpoint '{}'", path.string()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  Reader in(bytes);
  return read_header(in);
}

std::string checkpoint_id(const std::string& bytes) {
  std::uint64_t hash = 1469598103934665603ull;
  for (char c : bytes) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 1099511628211ull;
  }
  return fmt::format("{:016x}", hash);
}

}  // namespace p2mam
