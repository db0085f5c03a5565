#include "rlqfs/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "rlqfs/errors.hpp"

namespace rlqfs::model {
namespace {

constexpr char kMagic[8] = {'R', 'L', 'Q', 'F', 'S', 'C', 'K', 'P'};
constexpr std::uint64_t kMaxRank = 8;

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}

  std::uint64_t offset() const { return pos_; }
  void need(std::size_t n, const char* what) {
    if (end_ - pos_ < n) throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
  }
  void skip(std::size_t n, const char* what) {
    need(n, what);
    pos_ += n;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    const std::uint64_t at = pos_;
    const std::uint32_t n = u32(what);
    if (end_ - pos_ < n) throw FormatError(std::string("string length overruns file in ") + what, at);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

void write_config(Writer& w, const ModelConfig& c) {
  w.u64(c.vocab_size);
  w.u64(c.d_model);
  w.u64(c.n_heads);
  w.u64(c.n_enc_layers);
  w.u64(c.n_dec_layers);
  w.u64(c.ffn_dim);
  w.u64(c.max_positions);
  w.f64(c.dropout_p);
  w.f64(c.init_std);
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  c.vocab_size = r.u64("config.vocab_size");
  c.d_model = r.u64("config.d_model");
  c.n_heads = r.u64("config.n_heads");
  c.n_enc_layers = r.u64("config.n_enc_layers");
  c.n_dec_layers = r.u64("config.n_dec_layers");
  c.ffn_dim = r.u64("config.ffn_dim");
  c.max_positions = r.u64("config.max_positions");
  c.dropout_p = r.f64("config.dropout_p");
  c.init_std = r.f64("config.init_std");
  return c;
}

}  // namespace

const nd::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.tensor;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(ckpt.version);
  w.str(ckpt.kind);
  write_config(w, ckpt.config);
  w.u64(ckpt.vocab_hash);
  w.u64(ckpt.seed);
  w.u64(ckpt.step);
  w.u32(static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.tensor.rank()));
    for (auto d : t.tensor.shape()) w.u64(d);
    for (double v : t.tensor.data()) w.f64(v);
  }
  auto& bytes = w.bytes();
  const std::uint64_t sum = fnv1a(bytes.data(), bytes.size());
  w.u64(sum);
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kMagic + 8) throw FormatError("file too short to be a checkpoint", 0);
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw FormatError("bad magic", 0);
  const std::size_t body = bytes.size() - 8;
  Reader r(bytes, body);
  r.skip(sizeof kMagic, "magic");
  Checkpoint c;
  const std::uint64_t version_at = r.offset();
  c.version = r.u32("version");
  if (c.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(c.version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")",
                      version_at);
  }
  c.kind = r.str("kind");
  c.config = read_config(r);
  c.vocab_hash = r.u64("vocab_hash");
  c.seed = r.u64("seed");
  c.step = r.u64("step");
  const std::uint32_t n_meta = r.u32("meta count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str("meta key");
    c.meta[k] = r.str("meta value");
  }
  const std::uint32_t n_tensors = r.u32("tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str("tensor name");
    const std::uint64_t rank_at = r.offset();
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > kMaxRank) throw FormatError("tensor '" + name + "' has implausible rank", rank_at);
    nd::Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = r.u64("tensor dim");
      n *= d;
    }
    const std::uint64_t payload_at = r.offset();
    if (n > (body - payload_at) / 8) throw FormatError("tensor '" + name + "' payload overruns file", payload_at);
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64("tensor payload");
    c.tensors.push_back({std::move(name), nd::Tensor::from(std::move(shape), std::move(data))});
  }
  if (r.offset() != body) throw FormatError("trailing bytes after tensor table", r.offset());
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (stored != fnv1a(bytes.data(), body)) throw FormatError("checksum mismatch", body);
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void append_optimizer_state(Checkpoint& ckpt, const nd::ParamList& params, const nd::Optimizer& opt) {
  const auto& m = opt.first_moments();
  const auto& v = opt.second_moments();
  ckpt.meta["optimizer.steps"] = std::to_string(opt.steps_taken());
  for (std::size_t k = 0; k < m.size(); ++k) {
    ckpt.tensors.push_back({"optimizer.m." + params[k].name, nd::Tensor::from(params[k].tensor.shape(), m[k])});
  }
  for (std::size_t k = 0; k < v.size(); ++k) {
    ckpt.tensors.push_back({"optimizer.v." + params[k].name, nd::Tensor::from(params[k].tensor.shape(), v[k])});
  }
}

void restore_optimizer_state(const Checkpoint& ckpt, const nd::ParamList& params, nd::Optimizer& opt) {
  std::vector<std::vector<double>> m, v;
  for (const auto& p : params) {
    const auto* mk = ckpt.find("optimizer.m." + p.name);
    const auto* vk = ckpt.find("optimizer.v." + p.name);
    if ((mk == nullptr) != (vk == nullptr)) throw DataError("checkpoint has partial optimizer state for " + p.name);
    if (mk == nullptr) continue;
    if (mk->size() != p.tensor.size() || vk->size() != p.tensor.size()) {
      throw DataError("optimizer state for " + p.name + " has the wrong size");
    }
    m.emplace_back(mk->data().begin(), mk->data().end());
    v.emplace_back(vk->data().begin(), vk->data().end());
  }
  if (!m.empty() && m.size() != params.size()) throw DataError("checkpoint has optimizer state for some tensors only");
  opt.restore(std::stoull(require_meta(ckpt, "optimizer.steps")), std::move(m), std::move(v));
}

nd::ParamList stored_weights(const Checkpoint& ckpt, const nd::ParamList& params) {
  nd::ParamList out;
  for (const auto& p : params) {
    const auto* w = ckpt.find(p.name);
    if (w == nullptr) throw DataError("checkpoint is missing tensor " + p.name);
    out.push_back({p.name, *w});
  }
  return out;
}

std::string encode_real(double x) {
  std::ostringstream os;
  os << std::hex << std::bit_cast<std::uint64_t>(x);
  return os.str();
}

double decode_real(const std::string& s) {
  std::size_t used = 0;
  const auto bits = std::stoull(s, &used, 16);
  if (used != s.size()) throw DataError("malformed real in checkpoint metadata: " + s);
  return std::bit_cast<double>(static_cast<std::uint64_t>(bits));
}

const std::string& require_meta(const Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.meta.find(key);
  if (it == ckpt.meta.end()) throw DataError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

}  // namespace rlqfs::model
