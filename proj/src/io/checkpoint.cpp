#include "dmae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace dmae {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'M', 'C', 'K'};
constexpr std::uint32_t kMaxRank = 8;
constexpr std::string_view kHeadPrefix = "head.";

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename V>
  V get(const char* what) {
    V v{};
    raw(reinterpret_cast<char*>(&v), sizeof(V), what);
    return v;
  }

  void raw(char* dst, std::size_t bytes, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(in_.gcount()) != bytes) {
      throw Error(ErrorCode::kTruncated, std::string("checkpoint ends inside ") + what);
    }
  }

  std::size_t remaining() {
    const auto here = in_.tellg();
    in_.seekg(0, std::ios::end);
    const auto end = in_.tellg();
    in_.seekg(here);
    return static_cast<std::size_t>(end - here);
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
};

std::uint32_t narrow(std::size_t v) { return static_cast<std::uint32_t>(v); }

bool flag(Reader& r, const char* what) {
  auto v = r.get<std::uint8_t>(what);
  if (v > 1) throw Error(ErrorCode::kInconsistent, std::string("bad flag byte for ") + what);
  return v == 1;
}

void add_params(std::vector<NamedTensor>& out, const std::vector<Parameter<float>*>& params) {
  for (auto* p : params) out.push_back({p->name, p->value});
}

}  // namespace

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.attributes == b.attributes && a.length == b.length && a.hidden == b.hidden &&
         a.attention_hidden == b.attention_hidden && a.kernel_sizes == b.kernel_sizes &&
         a.groups == b.groups && a.kernel_temperature == b.kernel_temperature &&
         a.scale_temperature == b.scale_temperature && a.mask_ratio == b.mask_ratio &&
         a.noise == b.noise && a.use_dpe == b.use_dpe && a.use_rm == b.use_rm &&
         a.use_dk == b.use_dk && a.use_asf == b.use_asf && a.token == b.token;
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  const auto& h = ckpt.header;
  const auto& m = h.model;
  out.write(kMagic, 4);
  put(out, h.version);
  put(out, narrow(m.attributes));
  put(out, narrow(m.length));
  put(out, narrow(m.hidden));
  put(out, narrow(m.attention_hidden));
  for (auto k : m.kernel_sizes) put(out, narrow(k));
  put(out, narrow(m.effective_groups()));
  put(out, m.kernel_temperature);
  put(out, m.scale_temperature);
  put(out, m.mask_ratio);
  put(out, m.noise);
  put(out, m.token);
  for (bool b : {m.use_dpe, m.use_rm, m.use_dk, m.use_asf, h.warmup_active}) {
    put(out, static_cast<std::uint8_t>(b));
  }
  put(out, static_cast<std::uint8_t>(h.head));
  put(out, h.head_outputs);
  put(out, h.head_target);

  const auto& norm = ckpt.normalizer;
  put(out, narrow(norm.mean.size()));
  for (double v : norm.mean) put(out, v);
  for (double v : norm.stddev) put(out, v);

  put(out, narrow(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    put(out, static_cast<std::uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put(out, static_cast<std::uint8_t>(e.value.rank()));
    for (auto d : e.value.shape()) put(out, narrow(d));
    out.write(reinterpret_cast<const char*>(e.value.data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(float)));
  }
  if (!out) throw Error(ErrorCode::kIo, "failed to write checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  Reader r(in);
  char magic[4] = {};
  in.read(magic, 4);
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got > 0 && got < 4 && std::memcmp(magic, kMagic, got) == 0) {
    throw Error(ErrorCode::kTruncated, "checkpoint ends inside the magic bytes");
  }
  if (got != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorCode::kBadMagic, "not a checkpoint (bad magic bytes)");
  }
  Checkpoint ckpt;
  auto& h = ckpt.header;
  h.version = r.get<std::uint32_t>("version");
  if (h.version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch, "checkpoint version " + std::to_string(h.version) +
                                                 ", expected " +
                                                 std::to_string(kCheckpointVersion));
  }
  auto& m = h.model;
  m.attributes = r.get<std::uint32_t>("header");
  m.length = r.get<std::uint32_t>("header");
  m.hidden = r.get<std::uint32_t>("header");
  m.attention_hidden = r.get<std::uint32_t>("header");
  for (auto& k : m.kernel_sizes) k = r.get<std::uint32_t>("header");
  m.groups = r.get<std::uint32_t>("header");
  m.kernel_temperature = r.get<double>("header");
  m.scale_temperature = r.get<double>("header");
  m.mask_ratio = r.get<double>("header");
  m.noise = r.get<double>("header");
  m.token = r.get<double>("header");
  m.use_dpe = flag(r, "dpe");
  m.use_rm = flag(r, "rm");
  m.use_dk = flag(r, "dk");
  m.use_asf = flag(r, "asf");
  h.warmup_active = flag(r, "warmup");
  auto head = r.get<std::uint8_t>("header");
  if (head > static_cast<std::uint8_t>(HeadKind::kClassify)) {
    throw Error(ErrorCode::kInconsistent, "unknown head kind " + std::to_string(head));
  }
  h.head = static_cast<HeadKind>(head);
  h.head_outputs = r.get<std::uint32_t>("header");
  h.head_target = r.get<std::uint32_t>("header");
  if (!m.use_dk && m.groups != 1) {
    throw Error(ErrorCode::kInconsistent, "static-kernel checkpoint must record K = 1");
  }
  try {
    m.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kInconsistent, std::string("checkpoint header: ") + e.what());
  }
  if ((h.head == HeadKind::kNone) != (h.head_outputs == 0)) {
    throw Error(ErrorCode::kInconsistent, "head kind and head output count disagree");
  }

  auto count = r.get<std::uint32_t>("normaliser");
  if (count != 0 && count != m.attributes) {
    throw Error(ErrorCode::kInconsistent, "normaliser size " + std::to_string(count) +
                                              " does not match n = " +
                                              std::to_string(m.attributes));
  }
  ckpt.normalizer.mean.resize(count);
  ckpt.normalizer.stddev.resize(count);
  for (auto& v : ckpt.normalizer.mean) v = r.get<double>("normaliser");
  for (auto& v : ckpt.normalizer.stddev) v = r.get<double>("normaliser");

  auto entries = r.get<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < entries; ++i) {
    NamedTensor e;
    e.name.resize(r.get<std::uint16_t>("entry name"));
    r.raw(e.name.data(), e.name.size(), "entry name");
    auto rank = r.get<std::uint8_t>("entry rank");
    if (rank > kMaxRank) {
      throw Error(ErrorCode::kInconsistent, "entry " + e.name + " has rank " +
                                                std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>("entry shape");
    if (shape_size(shape) > r.remaining() / sizeof(float)) {
      throw Error(ErrorCode::kTruncated, "checkpoint ends inside entry " + e.name);
    }
    Tensor<float> value(shape);
    r.raw(reinterpret_cast<char*>(value.data()), value.size() * sizeof(float), "entry values");
    e.value = std::move(value);
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.at_end()) throw Error(ErrorCode::kInconsistent, "trailing bytes after last entry");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return read_checkpoint(in);
}

Checkpoint capture(DmaeModel<float>& model, const data::NormalizerState& normalizer,
                   bool warmup_active, FeedForwardHead<float>* head, std::uint32_t head_target) {
  Checkpoint ckpt;
  ckpt.header.model = model.config();
  if (!ckpt.header.model.use_dk) ckpt.header.model.groups = 1;
  ckpt.header.warmup_active = warmup_active;
  ckpt.normalizer = normalizer;
  add_params(ckpt.entries, model.parameters());
  for (auto& [name, tensor] : model.buffers()) ckpt.entries.push_back({name, *tensor});
  if (head) {
    std::vector<Parameter<float>*> hp;
    head->collect(hp);
    add_params(ckpt.entries, hp);
    ckpt.header.head_outputs = narrow(head->outputs());
    ckpt.header.head_target = head_target;
  }
  return ckpt;
}

void restore(const Checkpoint& ckpt, DmaeModel<float>& model, FeedForwardHead<float>* head) {
  std::map<std::string, Tensor<float>*> slots;
  auto claim = [&](const std::string& name, Tensor<float>* t) {
    if (!slots.emplace(name, t).second) {
      throw Error(ErrorCode::kInconsistent, "duplicate tensor name " + name);
    }
  };
  for (auto* p : model.parameters()) claim(p->name, &p->value);
  for (auto& [name, tensor] : model.buffers()) claim(name, tensor);
  if (head) {
    std::vector<Parameter<float>*> hp;
    head->collect(hp);
    for (auto* p : hp) claim(p->name, &p->value);
  }
  // A stored head is ignored when the caller only wants the encoder.
  std::vector<const NamedTensor*> wanted;
  for (const auto& e : ckpt.entries) {
    if (head || !e.name.starts_with(kHeadPrefix)) wanted.push_back(&e);
  }
  if (slots.size() != wanted.size()) {
    throw Error(ErrorCode::kInconsistent,
                "checkpoint holds " + std::to_string(wanted.size()) +
                    " tensors, architecture expects " + std::to_string(slots.size()));
  }
  for (const auto* entry : wanted) {
    const auto& e = *entry;
    auto it = slots.find(e.name);
    if (it == slots.end()) {
      throw Error(ErrorCode::kInconsistent, "unexpected tensor " + e.name);
    }
    if (!it->second->same_shape(e.value)) {
      throw Error(ErrorCode::kInconsistent, "shape mismatch for " + e.name);
    }
    *it->second = e.value;
    slots.erase(it);
  }
}

std::unique_ptr<DmaeModel<float>> build_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<DmaeModel<float>>(ckpt.header.model, 0);
  restore(ckpt, *model);
  return model;
}

void check_compatible(const CheckpointHeader& header, std::size_t attributes,
                      std::size_t length) {
  if (header.model.attributes != attributes || header.model.length != length) {
    std::ostringstream msg;
    msg << "data windows are (n=" << attributes << ", T=" << length
        << ") but the checkpoint expects (n=" << header.model.attributes
        << ", T=" << header.model.length << ")";
    throw Error(ErrorCode::kConfig, msg.str());
  }
}

}  // namespace dmae
