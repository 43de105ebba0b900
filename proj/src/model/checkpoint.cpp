#include "vdpo/model/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "vdpo/error.hpp"

namespace vdpo::model {

namespace {

std::vector<const char*> param_names() {
  std::vector<const char*> names;
  for (std::size_t i = 0; i < kParamCount; ++i) names.push_back(param_name(static_cast<ParamId>(i)));
  return names;
}

}  // namespace

void encode_config(ByteWriter& w, const ModelConfig& c) {
  w.u64(c.vocab_size);
  w.u64(c.image_dim);
  w.u64(c.embed_dim);
  w.u64(c.hidden_dim);
  w.u64(c.max_query_len);
  w.u64(c.max_response_len);
  w.u64(c.seed);
}

ModelConfig decode_config(ByteReader& r) {
  ModelConfig c;
  c.vocab_size = r.u64();
  c.image_dim = r.u64();
  c.embed_dim = r.u64();
  c.hidden_dim = r.u64();
  c.max_query_len = r.u64();
  c.max_response_len = r.u64();
  c.seed = r.u64();
  return c;
}

void encode_tensors(ByteWriter& w, std::span<const grad::Tensor> tensors,
                    std::span<const char* const> names) {
  w.u64(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    w.str(names[i]);
    w.u64(tensors[i].rank());
    for (auto e : tensors[i].shape()) w.u64(e);
    for (double v : tensors[i].values()) w.f64(v);
  }
}

std::vector<grad::Tensor> decode_tensors(ByteReader& r, std::span<const char* const> names) {
  const auto count = r.u64();
  if (count != names.size()) {
    throw Error(ErrorKind::kParse, "checkpoint holds " + std::to_string(count) +
                                       " tensors, expected " + std::to_string(names.size()));
  }
  std::vector<grad::Tensor> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto name = r.str();
    if (name != names[i]) {
      throw Error(ErrorKind::kParse, "unexpected tensor '" + name + "', expected '" +
                                         names[i] + "'");
    }
    const auto rank = r.u64();
    if (rank > 8) throw Error(ErrorKind::kParse, "implausible tensor rank");
    grad::Shape shape(rank);
    for (auto& e : shape) e = r.u64();
    const auto n = grad::element_count(shape);
    if (n > r.remaining() / 8) throw Error(ErrorKind::kParse, "tensor extends past end of data");
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    out.emplace_back(std::move(shape), std::move(values));
  }
  return out;
}

void encode_params(ByteWriter& w, const PolicyParams& params) {
  encode_config(w, params.config());
  const auto names = param_names();
  encode_tensors(w, params.tensors(), names);
}

PolicyParams decode_params(ByteReader& r) {
  ModelConfig config = decode_config(r);
  const auto names = param_names();
  return PolicyParams(config, decode_tensors(r, names));
}

void write_container(const std::filesystem::path& path, std::span<const std::uint8_t> payload) {
  ByteWriter w;
  w.raw({reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), sizeof(kCheckpointMagic)});
  w.u32(kCheckpointVersion);
  const Digest d = sha256(payload);
  w.raw(d);
  w.u64(payload.size());
  w.raw(payload);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(w.bytes().data()),
            static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw Error(ErrorKind::kIo, "write to " + path.string() + " failed");
}

std::vector<std::uint8_t> read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  ByteReader r(bytes);
  try {
    auto magic = r.raw(sizeof(kCheckpointMagic));
    if (!std::equal(magic.begin(), magic.end(),
                    reinterpret_cast<const std::uint8_t*>(kCheckpointMagic))) {
      throw Error(ErrorKind::kDigest, path.string() + ": not a checkpoint (bad magic)");
    }
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
      throw Error(ErrorKind::kDigest, path.string() + ": unsupported checkpoint version " +
                                          std::to_string(version));
    }
    Digest stored{};
    auto d = r.raw(stored.size());
    std::copy(d.begin(), d.end(), stored.begin());
    const auto len = r.u64();
    if (len != r.remaining()) {
      throw Error(ErrorKind::kDigest, path.string() + ": payload length mismatch");
    }
    auto payload = r.raw(len);
    if (sha256(payload) != stored) {
      throw Error(ErrorKind::kDigest, path.string() + ": digest mismatch");
    }
    return {payload.begin(), payload.end()};
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kParse) {
      throw Error(ErrorKind::kDigest, path.string() + ": truncated checkpoint");
    }
    throw;
  }
}

void save_params(const std::filesystem::path& path, const PolicyParams& params) {
  ByteWriter w;
  encode_params(w, params);
  w.u32(0);  // no trainer state
  write_container(path, w.bytes());
}

PolicyParams load_params(const std::filesystem::path& path) {
  const auto payload = read_container(path);
  ByteReader r(payload);
  return decode_params(r);
}

}  // namespace vdpo::model
