#include "udah/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "udah/errors.hpp"

namespace udah {

namespace {

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> init(-bound, bound);
  Linear l{Tensor(Shape{in, out}), Tensor(Shape{out})};
  for (double& w : l.weight.data()) w = init(rng);
  return l;
}

MlpBlock make_block(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return MlpBlock{make_linear(in, out, rng), Tensor(Shape{out}, 1.0), Tensor(Shape{out})};
}

ad::Var affine(ad::Tape& tape, const Linear& l, ad::Var x) {
  return ad::add(ad::matmul(x, tape.param(l.weight)), tape.param(l.bias));
}

ad::Var mlp_block(ad::Tape& tape, const MlpBlock& b, ad::Var x, double rate, bool train, std::mt19937_64& rng) {
  ad::Var h = affine(tape, b.affine, x);
  h = ad::dropout(h, rate, train, rng);
  h = ad::layer_norm(h, tape.param(b.ln_gain), tape.param(b.ln_bias));
  return ad::relu(h);
}

template <typename Self, typename Out>
void collect(Self& p, Out& out) {
  auto add_block = [&](const std::string& prefix, auto& b) {
    out.emplace_back(prefix + ".weight", &b.affine.weight);
    out.emplace_back(prefix + ".bias", &b.affine.bias);
    out.emplace_back(prefix + ".ln_gain", &b.ln_gain);
    out.emplace_back(prefix + ".ln_bias", &b.ln_bias);
  };
  for (std::size_t i = 0; i < p.encoder.layers.size(); ++i) add_block("encoder." + std::to_string(i), p.encoder.layers[i]);
  out.emplace_back("hash.weight", &p.head.classifier.weight);
  out.emplace_back("hash.bias", &p.head.classifier.bias);
  auto add_disc = [&](const std::string& prefix, auto& d) {
    for (std::size_t i = 0; i < d.hidden.size(); ++i) add_block(prefix + "." + std::to_string(i), d.hidden[i]);
    out.emplace_back(prefix + ".out.weight", &d.classifier.weight);
    out.emplace_back(prefix + ".out.bias", &d.classifier.bias);
  };
  add_disc("disc_source", p.source_disc);
  add_disc("disc_target", p.target_disc);
}

}  // namespace

void ModelConfig::validate() const {
  if (input_dim == 0) throw ConfigError("model: input dimension must be positive");
  if (encoder_widths.empty()) throw ConfigError("model: encoder needs at least one layer");
  if (std::find(encoder_widths.begin(), encoder_widths.end(), 0) != encoder_widths.end() ||
      std::find(discriminator_widths.begin(), discriminator_widths.end(), 0) != discriminator_widths.end()) {
    throw ConfigError("model: layer widths must be positive");
  }
  if (code_length == 0) throw ConfigError("model: code length must be positive");
  if (options_per_block != 2) throw ConfigError("model: hash blocks have exactly 2 options");
  if (num_classes < 2) throw ConfigError("model: need at least 2 classes");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
}

CenterTable CenterTable::empty(std::size_t num_classes, std::size_t dim) {
  return CenterTable{Tensor(Shape{num_classes, dim}), std::vector<bool>(num_classes, false)};
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  collect(*this, out);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  collect(*this, out);
  return out;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.config = config;
  p.encoder.dropout = config.dropout;
  std::size_t in = config.input_dim;
  for (std::size_t w : config.encoder_widths) {
    p.encoder.layers.push_back(make_block(in, w, rng));
    in = w;
  }
  const std::size_t emb = config.embedding_dim();
  p.head = HashHead{make_linear(emb, config.code_length * config.options_per_block, rng), config.code_length,
                    config.options_per_block};
  for (Discriminator* d : {&p.source_disc, &p.target_disc}) {
    d->dropout = config.dropout;
    std::size_t din = emb;
    for (std::size_t w : config.discriminator_widths) {
      d->hidden.push_back(make_block(din, w, rng));
      din = w;
    }
    d->classifier = make_linear(din, config.num_classes, rng);
  }
  p.source_centers = CenterTable::empty(config.num_classes, emb);
  p.target_centers = CenterTable::empty(config.num_classes, emb);
  return p;
}

HashCode::HashCode(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (std::uint8_t b : bits_) {
    if (b > 1) throw DataError("hash code: bits must be 0 or 1");
  }
}

ad::Var encode(ad::Tape& tape, const Encoder& enc, ad::Var x, bool train, std::mt19937_64& rng) {
  if (enc.layers.empty()) throw ConfigError("encode: encoder has no layers");
  const std::size_t d = enc.layers.front().affine.weight.dim(0);
  if (x.value().rank() != 2 || x.value().cols() != d) {
    throw ShapeError("encode: input " + shape_string(x.shape()) + " does not match attribute dimension " +
                     std::to_string(d));
  }
  ad::Var h = x;
  for (const MlpBlock& b : enc.layers) h = mlp_block(tape, b, h, enc.dropout, train, rng);
  return h;
}

ad::Var hash_logits(ad::Tape& tape, const HashHead& head, ad::Var z) { return affine(tape, head.classifier, z); }

Tensor sample_gumbel(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  // Open interval keeps both logs finite.
  std::uniform_real_distribution<double> unit(std::numeric_limits<double>::min(), 1.0);
  Tensor g(Shape{rows, cols});
  for (double& v : g.data()) {
    double u = unit(rng);
    if (u >= 1.0) u = std::nextafter(1.0, 0.0);
    v = -std::log(-std::log(u));
  }
  return g;
}

ad::Var relax_blocks(ad::Var logits, const Tensor& noise, double tau, std::size_t options) {
  if (!(tau > 0.0)) throw ConfigError("relax_hash: temperature must be positive");
  // Copied: recording new nodes may move the tape's value storage.
  const Shape shape = logits.shape();
  const std::size_t size = shape_size(shape);
  if (noise.shape() != shape) {
    throw ShapeError("relax_hash: noise " + shape_string(noise.shape()) + " vs logits " + shape_string(shape));
  }
  if (shape.empty() || shape.back() % options != 0) {
    throw ShapeError("relax_hash: logits width not divisible into blocks");
  }
  ad::Tape& tape = logits.tape();
  ad::Var perturbed = ad::scale(ad::add(logits, tape.constant(noise)), 1.0 / tau);
  ad::Var blocks = ad::reshape(perturbed, Shape{size / options, options});
  return ad::reshape(ad::row_softmax(blocks), shape);
}

ad::Var relax_hash(ad::Tape& tape, const HashHead& head, ad::Var z, const Tensor& noise, double tau) {
  return relax_blocks(hash_logits(tape, head, z), noise, tau, head.options);
}

ad::Var discriminate(ad::Tape& tape, const Discriminator& disc, ad::Var z, bool train, std::mt19937_64& rng) {
  ad::Var h = z;
  for (const MlpBlock& b : disc.hidden) h = mlp_block(tape, b, h, disc.dropout, train, rng);
  return ad::row_softmax(affine(tape, disc.classifier, h));
}

HashCode code_from_logits(std::span<const double> logits, std::size_t options) {
  std::vector<std::uint8_t> bits(logits.size() / options);
  for (std::size_t j = 0; j < bits.size(); ++j) {
    const double* block = logits.data() + j * options;
    bits[j] = static_cast<std::uint8_t>(std::max_element(block, block + options) - block);
  }
  return HashCode(std::move(bits));
}

HashCode emit_code(const HashHead& head, std::span<const double> embedding) {
  const Tensor& w = head.classifier.weight;
  if (embedding.size() != w.dim(0)) throw ShapeError("emit_code: embedding width does not match the hash head");
  std::vector<double> logits(head.classifier.bias.data().begin(), head.classifier.bias.data().end());
  for (std::size_t i = 0; i < embedding.size(); ++i) {
    for (std::size_t j = 0; j < logits.size(); ++j) logits[j] += embedding[i] * w.at(i, j);
  }
  return code_from_logits(logits, head.options);
}

Tensor embed_graph(const ModelParams& params, const Graph& g, std::size_t batch_size) {
  const std::size_t n = g.num_nodes();
  const std::size_t dim = params.config.embedding_dim();
  Tensor out(Shape{n, dim});
  std::mt19937_64 unused(0);
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<NodeId> ids;
    for (std::size_t v = start; v < std::min(n, start + batch_size); ++v) ids.push_back(static_cast<NodeId>(v));
    ad::Tape tape;
    ad::Var z = encode(tape, params.encoder, tape.constant(g.dense_attributes(ids)), false, unused);
    std::copy(z.value().data().begin(), z.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(start * dim));
  }
  return out;
}

std::vector<HashCode> emit_codes(const ModelParams& params, const Graph& g) {
  const Tensor z = embed_graph(params, g);
  std::vector<HashCode> codes;
  codes.reserve(g.num_nodes());
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    codes.push_back(emit_code(params.head, z.data().subspan(v * z.cols(), z.cols())));
  }
  return codes;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[8] = {'U', 'D', 'A', 'H', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError(path.string() + ": truncated checkpoint");
  return v;
}

std::string join_widths(const std::vector<std::size_t>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + std::to_string(w[i]);
  return s;
}

std::vector<std::size_t> parse_widths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoul(item));
  }
  return out;
}

Tensor seen_tensor(const CenterTable& t) {
  Tensor s(Shape{t.seen.size()});
  for (std::size_t i = 0; i < t.seen.size(); ++i) s[i] = t.seen[i] ? 1.0 : 0.0;
  return s;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ostringstream meta;
  meta << "input_dim=" << params.config.input_dim << '\n'
       << "encoder_widths=" << join_widths(params.config.encoder_widths) << '\n'
       << "discriminator_widths=" << join_widths(params.config.discriminator_widths) << '\n'
       << "code_length=" << params.config.code_length << '\n'
       << "options_per_block=" << params.config.options_per_block << '\n'
       << "num_classes=" << params.config.num_classes << '\n';
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), params.config.dropout);
  meta << "dropout=" << std::string(buf, end) << '\n';

  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& [name, t] : params.named_parameters()) tensors.emplace_back(name, *t);
  tensors.emplace_back("centers.source", params.source_centers.centers);
  tensors.emplace_back("centers.source.seen", seen_tensor(params.source_centers));
  tensors.emplace_back("centers.target", params.target_centers.centers);
  tensors.emplace_back("centers.target.seen", seen_tensor(params.target_centers));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  const std::string m = meta.str();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.size()));
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.string() + ": not a checkpoint file");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  std::string meta(get<std::uint32_t>(in, path), '\0');
  if (!in.read(meta.data(), static_cast<std::streamsize>(meta.size()))) throw DataError(path.string() + ": truncated checkpoint");

  std::map<std::string, std::string> kv;
  std::stringstream ms(meta);
  std::string line;
  while (std::getline(ms, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  ModelConfig cfg;
  try {
    cfg.input_dim = std::stoul(kv.at("input_dim"));
    cfg.encoder_widths = parse_widths(kv.at("encoder_widths"));
    cfg.discriminator_widths = parse_widths(kv.at("discriminator_widths"));
    cfg.code_length = std::stoul(kv.at("code_length"));
    cfg.options_per_block = std::stoul(kv.at("options_per_block"));
    cfg.num_classes = std::stoul(kv.at("num_classes"));
    cfg.dropout = std::stod(kv.at("dropout"));
  } catch (const std::exception&) {
    throw DataError(path.string() + ": incomplete checkpoint metadata");
  }

  std::map<std::string, Tensor> tensors;
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(in, path), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw DataError(path.string() + ": truncated checkpoint");
    Shape shape(get<std::uint32_t>(in, path));
    for (auto& d : shape) d = get<std::uint64_t>(in, path);
    std::vector<double> data(shape_size(shape));
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw DataError(path.string() + ": truncated checkpoint");
    }
    tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }

  ModelParams p = init_model(cfg, 0);
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError(path.string() + ": missing tensor " + name);
    if (it->second.shape() != dst.shape()) {
      throw DataError(path.string() + ": tensor " + name + " has shape " + shape_string(it->second.shape()) +
                      ", expected " + shape_string(dst.shape()));
    }
    dst = std::move(it->second);
  };
  for (auto& [name, t] : p.named_parameters()) take(name, *t);
  for (auto [prefix, table] : {std::pair{"centers.source", &p.source_centers}, std::pair{"centers.target", &p.target_centers}}) {
    take(prefix, table->centers);
    Tensor seen(Shape{cfg.num_classes});
    take(std::string(prefix) + ".seen", seen);
    for (std::size_t k = 0; k < cfg.num_classes; ++k) table->seen[k] = seen[k] != 0.0;
  }
  return p;
}

}  // namespace udah
