#include "rashnet/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

namespace rashnet {

namespace {

constexpr std::array<char, 4> kMagic{'R', 'N', 'E', 'T'};

// Byte-reverses in place on big-endian hosts so the file is always LE.
void to_little_endian(std::byte* p, std::size_t width, std::size_t count) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i) std::reverse(p + i * width, p + (i + 1) * width);
  }
}

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  template <class T>
  void put(T v) {
    std::array<std::byte, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    to_little_endian(b.data(), sizeof(T), 1);
    raw(b.data(), b.size());
  }
  void raw(const std::byte* p, std::size_t n) {
    out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw CheckpointError("checkpoint: write failed");
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <class T>
  T get() {
    std::array<std::byte, sizeof(T)> b;
    raw(b.data(), b.size());
    to_little_endian(b.data(), sizeof(T), 1);
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
  }
  void raw(std::byte* p, std::size_t n) {
    in_.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw CheckpointError("checkpoint: truncated file");
  }

 private:
  std::istream& in_;
};

void write_config(Writer& w, const NetworkConfig& c) {
  w.put<std::int32_t>(c.variant);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.block));
  for (int b : c.stage_blocks) w.put<std::int32_t>(b);
  for (int b : c.stage_widths) w.put<std::int32_t>(b);
  w.put<std::int32_t>(c.num_classes);
  w.put<std::int32_t>(c.input_size);
  w.put<std::int32_t>(c.input_channels);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.dtype));
}

NetworkConfig read_config(Reader& r) {
  NetworkConfig c;
  c.variant = r.get<std::int32_t>();
  const auto block = r.get<std::uint8_t>();
  if (block != 1 && block != 2) throw CheckpointError("checkpoint: unknown block kind " + std::to_string(block));
  c.block = static_cast<BlockKind>(block);
  for (int& b : c.stage_blocks) b = r.get<std::int32_t>();
  for (int& b : c.stage_widths) b = r.get<std::int32_t>();
  c.num_classes = r.get<std::int32_t>();
  c.input_size = r.get<std::int32_t>();
  c.input_channels = r.get<std::int32_t>();
  const auto dtype = r.get<std::uint8_t>();
  if (dtype != 1 && dtype != 2) throw CheckpointError("checkpoint: unknown dtype code " + std::to_string(dtype));
  c.dtype = static_cast<DType>(dtype);
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: invalid config: ") + e.what());
  }
  return c;
}

void write_tensor(Writer& w, const std::string& name, const Tensor& t, bool trainable) {
  if (name.size() > 0xFFFF) throw CheckpointError("checkpoint: tensor name too long");
  w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.raw(reinterpret_cast<const std::byte*>(name.data()), name.size());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype()));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) w.put<std::int64_t>(e);
  w.put<std::uint8_t>(trainable ? 1 : 0);
  std::vector<std::byte> bytes(t.bytes().begin(), t.bytes().end());
  to_little_endian(bytes.data(), dtype_size(t.dtype()), static_cast<std::size_t>(t.numel()));
  w.raw(bytes.data(), bytes.size());
}

// Reads one entry into `dst`, checking it against the expected slot.
bool read_tensor(Reader& r, const std::string& expected_name, Tensor& dst) {
  const auto len = r.get<std::uint16_t>();
  std::string name(len, '\0');
  r.raw(reinterpret_cast<std::byte*>(name.data()), len);
  if (name != expected_name) {
    throw CheckpointError("checkpoint: expected tensor '" + expected_name + "', found '" + name + "'");
  }
  const auto dtype = r.get<std::uint8_t>();
  if (dtype != static_cast<std::uint8_t>(dst.dtype())) {
    throw CheckpointError("checkpoint: dtype mismatch for '" + name + "'");
  }
  const auto rank = r.get<std::uint8_t>();
  Shape shape(rank);
  for (auto& e : shape) e = r.get<std::int64_t>();
  if (shape != dst.shape()) {
    throw CheckpointError("checkpoint: shape " + shape_str(shape) + " for '" + name + "', config implies " +
                          shape_str(dst.shape()));
  }
  const bool trainable = r.get<std::uint8_t>() != 0;
  std::vector<std::byte> bytes(dst.bytes().size());
  r.raw(bytes.data(), bytes.size());
  to_little_endian(bytes.data(), dtype_size(dst.dtype()), static_cast<std::size_t>(dst.numel()));
  dispatch_dtype(dst.dtype(), [&]<class T>() { std::memcpy(dst.data<T>().data(), bytes.data(), bytes.size()); });
  return trainable;
}

}  // namespace

void save_checkpoint(const Network& net, std::ostream& out) {
  Writer w(out);
  w.raw(reinterpret_cast<const std::byte*>(kMagic.data()), kMagic.size());
  w.put<std::uint32_t>(kCheckpointVersion);
  write_config(w, net.config());
  w.put<std::uint8_t>(net.policy() == TrainPolicy::all ? 1 : 0);
  const auto params = net.parameters();
  const auto buffers = net.buffers();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (const auto& p : params) write_tensor(w, p.name, p.var.value(), p.var.requires_grad());
  for (const auto& [name, t] : buffers) write_tensor(w, name, *t, false);
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(path.string() + ": cannot open for writing");
  save_checkpoint(net, out);
}

Network load_checkpoint(std::istream& in) {
  Reader r(in);
  std::array<char, 4> magic{};
  r.raw(reinterpret_cast<std::byte*>(magic.data()), magic.size());
  if (magic != kMagic) throw CheckpointError("checkpoint: bad magic (not an RNET file)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const NetworkConfig config = read_config(r);
  const auto policy = r.get<std::uint8_t>();
  if (policy > 1) throw CheckpointError("checkpoint: unknown policy code");

  Network net(config, 0);
  net.set_trainable(policy == 1 ? TrainPolicy::all : TrainPolicy::head_only);
  auto params = net.parameters();
  auto buffers = net.buffers();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size() + buffers.size()) {
    throw CheckpointError("checkpoint: " + std::to_string(count) + " tensors, config declares " +
                          std::to_string(params.size() + buffers.size()));
  }
  for (auto& p : params) {
    const bool trainable = read_tensor(r, p.name, p.var.mutable_value());
    p.var.set_requires_grad(trainable);
  }
  for (auto& [name, t] : buffers) read_tensor(r, name, *t);
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes");
  return net;
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open checkpoint");
  return load_checkpoint(in);
}

}  // namespace rashnet
