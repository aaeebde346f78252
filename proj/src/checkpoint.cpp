#include "dpu/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dpu/error.hpp"

namespace dpu {

namespace {

void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("checkpoint write failed");
}

void read_bytes(std::istream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw FormatError("checkpoint truncated at byte " +
                      std::to_string(static_cast<long long>(in.tellg())));
}

template <typename T>
void write_le(std::ostream& out, T value) {
  unsigned char buf[sizeof(T)];
  using U = std::make_unsigned_t<T>;
  U u;
  std::memcpy(&u, &value, sizeof(T));
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(u >> (8 * i));
  write_bytes(out, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  read_bytes(in, buf, sizeof(T));
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(buf[i]) << (8 * i);
  T value;
  std::memcpy(&value, &u, sizeof(T));
  return value;
}

void write_f32(std::ostream& out, float value) {
  uint32_t bits;
  std::memcpy(&bits, &value, sizeof(bits));
  write_le<uint32_t>(out, bits);
}

float read_f32(std::istream& in) {
  const uint32_t bits = read_le<uint32_t>(in);
  float value;
  std::memcpy(&value, &bits, sizeof(value));
  return value;
}

void write_tensor(std::ostream& out, const Mat& m) {
  write_le<uint32_t>(out, static_cast<uint32_t>(m.rows()));
  write_le<uint32_t>(out, static_cast<uint32_t>(m.cols()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) write_f32(out, static_cast<float>(m(r, c)));
}

Mat read_tensor(std::istream& in) {
  const uint32_t rows = read_le<uint32_t>(in);
  const uint32_t cols = read_le<uint32_t>(in);
  Mat m(rows, cols);
  for (uint32_t r = 0; r < rows; ++r)
    for (uint32_t c = 0; c < cols; ++c) m(r, c) = static_cast<Real>(read_f32(in));
  return m;
}

// Tensors serialized per layer, in a fixed order per kind.
template <typename Fn>
void for_each_tensor(const NetworkSpec& spec, NetworkState& state, Fn&& fn) {
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    LayerState& st = state.layers[i];
    switch (spec.layers[i].kind) {
      case LayerKind::Dense:
        fn(st.w), fn(st.b), fn(st.m_w), fn(st.v_w), fn(st.m_b), fn(st.v_b);
        break;
      case LayerKind::Embedding:
        fn(st.w), fn(st.m_w), fn(st.v_w);
        break;
      case LayerKind::BatchNorm:
        fn(st.w), fn(st.b), fn(st.running_mean), fn(st.running_var);
        fn(st.m_w), fn(st.v_w), fn(st.m_b), fn(st.v_b);
        break;
      default:
        break;
    }
  }
}

}  // namespace

std::string network_spec_to_json(const NetworkSpec& spec) {
  nlohmann::ordered_json j;
  j["input_width"] = spec.input_width;
  j["task"] = to_string(spec.task.kind);
  j["classes"] = spec.task.classes;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& ls : spec.layers) {
    nlohmann::ordered_json l;
    l["kind"] = to_string(ls.kind);
    if (ls.kind == LayerKind::Dense || ls.kind == LayerKind::Embedding) l["width"] = ls.width;
    if (ls.kind == LayerKind::Dropout) l["rate"] = ls.dropout_rate;
    if (ls.kind == LayerKind::Embedding) l["vocab"] = ls.vocab_size;
    layers.push_back(l);
  }
  j["layers"] = layers;
  return j.dump();
}

NetworkSpec network_spec_from_json(const std::string& text) {
  NetworkSpec spec;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad network spec JSON: ") + e.what());
  }
  spec.input_width = j.at("input_width").get<int>();
  spec.task = task_from_string(j.at("task").get<std::string>(), j.value("classes", 0));
  for (const auto& l : j.at("layers")) {
    LayerSpec ls;
    ls.kind = layer_kind_from_string(l.at("kind").get<std::string>());
    ls.width = l.value("width", 0);
    ls.dropout_rate = l.value("rate", 0.0);
    ls.vocab_size = l.value("vocab", 0);
    spec.layers.push_back(ls);
  }
  return spec;
}

void save_network(std::ostream& out, const NetworkSpec& spec, const NetworkState& state) {
  write_bytes(out, kCheckpointMagic, 4);
  write_le<uint16_t>(out, kCheckpointVersion);
  const std::string spec_json = network_spec_to_json(spec);
  write_le<uint32_t>(out, static_cast<uint32_t>(spec_json.size()));
  write_bytes(out, spec_json.data(), spec_json.size());
  write_le<uint64_t>(out, state.step);
  write_le<uint64_t>(out, state.epoch);
  auto& mutable_state = const_cast<NetworkState&>(state);
  for_each_tensor(spec, mutable_state, [&out](Mat& m) { write_tensor(out, m); });
}

void save_network(const std::string& path, const NetworkSpec& spec,
                  const NetworkState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  save_network(out, spec, state);
}

LoadedNetwork load_network(std::istream& in, bool allow_trailing) {
  char magic[4];
  read_bytes(in, magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError("bad checkpoint magic at byte 0");
  const uint16_t version = read_le<uint16_t>(in);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));

  const uint32_t spec_len = read_le<uint32_t>(in);
  std::string spec_json(spec_len, '\0');
  read_bytes(in, spec_json.data(), spec_len);

  LoadedNetwork net;
  net.spec = network_spec_from_json(spec_json);
  validate(net.spec);
  net.state.step = read_le<uint64_t>(in);
  net.state.epoch = read_le<uint64_t>(in);
  net.state.layers.resize(net.spec.layers.size());
  for_each_tensor(net.spec, net.state, [&in](Mat& m) { m = read_tensor(in); });

  if (!allow_trailing) {
    in.peek();
    if (!in.eof()) throw FormatError("trailing bytes after checkpoint payload");
  }
  return net;
}

LoadedNetwork load_network(const std::string& path, bool allow_trailing) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return load_network(in, allow_trailing);
}

}  // namespace dpu
