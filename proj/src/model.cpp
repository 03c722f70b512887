// SPDX-License-Identifier: Apache-2.0
#include "vaguide/model.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "vaguide/binary_io.hpp"
#include "vaguide/crc32c.hpp"
#include "vaguide/error.hpp"
#include "vaguide/rng.hpp"

namespace vaguide {

using diff::DiffArray;
using diff::Shape;
using diff::Tape;
using diff::Tensor;

namespace {

constexpr char kCheckpointMagic[4] = {'V', 'A', 'C', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;
constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-6;
// Pixels live in [0, 1]; centring them keeps patch embeddings balanced
// against the positional table.
constexpr double kPixelMean = 0.5;
constexpr double kPixelStd = 0.25;

std::string kind_name(BackboneKind k) { return k == BackboneKind::transformer ? "transformer" : "conv"; }
std::string variant_name(AdapterVariant v) { return v == AdapterVariant::full ? "full" : "vanilla"; }
std::string model_kind_name(ModelKind k) { return k == ModelKind::va_adapter ? "va_adapter" : "single_frame"; }

std::string site_prefix(int site) { return "adapter.site" + std::to_string(site) + "."; }
std::string block_prefix(int b) { return "backbone.block" + std::to_string(b) + "."; }
std::string head_prefix(int i) { return "head.plane" + std::to_string(i) + "."; }

// Groups parameters for reporting: "backbone", "adapter.<part>", "head.<part>".
std::string component_of(const std::string &name) {
  if (name.rfind("backbone.", 0) == 0) return "backbone";
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= name.size()) {
    const std::size_t dot = name.find('.', start);
    const std::string tok = name.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    const bool indexed = tok.rfind("site", 0) == 0 || tok.rfind("plane", 0) == 0;
    if (!indexed) parts.push_back(tok);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (parts.size() >= 2 && parts[0] == "head" && name.find(".plane") != std::string::npos) return "head.planes";
  return parts.size() >= 2 ? parts[0] + "." + parts[1] : parts.front();
}

// 2-D sin/cos positional table for a g x g token grid, [g*g, C]. The first
// half of the channels encodes the row, the second half the column.
Tensor<double> sincos_2d(int g, int C) {
  const std::size_t half = static_cast<std::size_t>(C / 2);
  const auto table = timestep_embedding(g, C / 2);
  Tensor<double> t({static_cast<std::size_t>(g * g), static_cast<std::size_t>(C)});
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x)
      for (std::size_t d = 0; d < half; ++d) {
        t.data[(y * g + x) * C + d] = table.data[y * half + d];
        t.data[(y * g + x) * C + half + d] = table.data[x * half + d];
      }
  return t;
}

template <class T>
struct Net {
  Tape<T> &tape;
  diff::ParamStore<T> &ps;

  DiffArray<T> p(const std::string &name) const { return tape.param(ps.at(name)); }

  DiffArray<T> linear(const DiffArray<T> &x, const std::string &name) const {
    return diff::add(diff::matmul(x, p(name + ".w")), p(name + ".b"));
  }

  DiffArray<T> norm(const DiffArray<T> &x, const std::string &name) const {
    return diff::layer_norm(x, p(name + ".g"), p(name + ".b"), static_cast<T>(kLayerNormEps));
  }

  // x: [B, N, C] -> [B, N, C]
  DiffArray<T> attention(const DiffArray<T> &x, const std::string &name, int heads) const {
    const std::size_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
    const std::size_t H = static_cast<std::size_t>(heads), dh = C / H;
    auto qkv = linear(x, name + ".qkv");
    qkv = diff::permute(diff::reshape(qkv, {B, N, 3, H, dh}), {2, 0, 3, 1, 4});
    auto parts = diff::split(qkv, 0, {1, 1, 1});
    auto q = diff::reshape(parts[0], {B * H, N, dh});
    auto k = diff::reshape(parts[1], {B * H, N, dh});
    auto v = diff::reshape(parts[2], {B * H, N, dh});
    auto scores = diff::scale(diff::matmul(q, diff::transpose(k)), static_cast<T>(1.0 / std::sqrt(double(dh))));
    auto o = diff::matmul(diff::softmax(scores), v);
    o = diff::reshape(diff::permute(diff::reshape(o, {B, H, N, dh}), {0, 2, 1, 3}), {B, N, C});
    return linear(o, name + ".proj");
  }

  DiffArray<T> mlp(const DiffArray<T> &x, const std::string &name) const {
    return linear(diff::gelu(linear(x, name + ".fc1")), name + ".fc2");
  }

  // Pre-LN transformer block used inside the interaction module.
  DiffArray<T> transformer_block(DiffArray<T> x, const std::string &name, int heads) const {
    x = diff::add(x, attention(norm(x, name + ".ln1"), name + ".attn", heads));
    return diff::add(x, mlp(norm(x, name + ".ln2"), name + ".mlp"));
  }
};

template <class T>
void add_linear(diff::ParamStore<T> &ps, const std::string &name, std::size_t in, std::size_t out, double std,
                std::uint64_t seed, bool trainable) {
  ps.add(name + ".w", std > 0 ? diff::init_trunc_normal<T>({in, out}, std, seed) : Tensor<T>({in, out}), trainable);
  ps.add(name + ".b", Tensor<T>({out}), trainable);
}

template <class T>
void add_norm(diff::ParamStore<T> &ps, const std::string &name, std::size_t dim, bool trainable) {
  ps.add(name + ".g", Tensor<T>({dim}, T(1)), trainable);
  ps.add(name + ".b", Tensor<T>({dim}), trainable);
}

// Pre-LN transformer block parameters with the given init scale rule.
template <class T>
void add_transformer_block(diff::ParamStore<T> &ps, const std::string &name, std::size_t C, int mlp_ratio,
                           bool fan_in_init, SplitMix64 &seeds, bool trainable) {
  const std::size_t hid = C * static_cast<std::size_t>(mlp_ratio);
  auto sd = [&](std::size_t fan_in) { return fan_in_init ? 1.0 / std::sqrt(double(fan_in)) : kInitStd; };
  add_norm(ps, name + ".ln1", C, trainable);
  add_linear(ps, name + ".attn.qkv", C, 3 * C, sd(C), seeds.next(), trainable);
  add_linear(ps, name + ".attn.proj", C, C, sd(C), seeds.next(), trainable);
  add_norm(ps, name + ".ln2", C, trainable);
  add_linear(ps, name + ".mlp.fc1", C, hid, sd(C), seeds.next(), trainable);
  add_linear(ps, name + ".mlp.fc2", hid, C, sd(hid), seeds.next(), trainable);
}

// Conv-kind neighbourhood gather: for each of the 3x3 offsets, the source
// token of every output token, or `pad` when the offset leaves the grid.
std::vector<std::vector<std::size_t>> conv_offsets(int g) {
  std::vector<std::vector<std::size_t>> out;
  const std::size_t pad = static_cast<std::size_t>(g * g);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      std::vector<std::size_t> idx;
      for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x) {
          const int sy = y + dy, sx = x + dx;
          idx.push_back(sy < 0 || sy >= g || sx < 0 || sx >= g ? pad : static_cast<std::size_t>(sy * g + sx));
        }
      out.push_back(std::move(idx));
    }
  return out;
}

}  // namespace

// ---- configuration ------------------------------------------------------------

void BackboneConfig::validate() const {
  if (depth < 2) fail(ErrorCode::invalid_argument, "backbone depth must be >= 2");
  if (dim < 2 || patch < 1 || heads < 1 || mlp_ratio < 1 || image_size < 1)
    fail(ErrorCode::invalid_argument, "backbone sizes must be positive");
  if (image_size % patch != 0) fail(ErrorCode::invalid_argument, "image size must be divisible by patch size");
  if (dim % heads != 0) fail(ErrorCode::invalid_argument, "backbone dim must be divisible by heads");
  if (dim % 4 != 0) fail(ErrorCode::invalid_argument, "backbone dim must be divisible by 4 for the 2-D position table");
}

std::vector<int> default_sites(const BackboneConfig &bb) {
  std::vector<int> sites;
  const int first = bb.depth - (bb.depth + 1) / 2;
  for (int b = first; b < bb.depth; ++b) {
    if (bb.kind == BackboneKind::transformer) {
      sites.push_back(2 * b);
      sites.push_back(2 * b + 1);
    } else {
      sites.push_back(b);
    }
  }
  return sites;
}

int site_block(const BackboneConfig &bb, int site) { return bb.kind == BackboneKind::transformer ? site / 2 : site; }

void ModelConfig::validate() const {
  backbone.validate();
  if (seq_dim < 1 || hidden < 1) fail(ErrorCode::invalid_argument, "head sizes must be positive");
  if (!(output_scale > 0.0) || !std::isfinite(output_scale))
    fail(ErrorCode::invalid_argument, "output_scale must be positive");
  if (kind == ModelKind::single_frame) return;
  const auto &a = adapter;
  if (a.r < 1) fail(ErrorCode::invalid_argument, "adapter r must be >= 1");
  if (a.r % 2 != 0) fail(ErrorCode::invalid_argument, "adapter r must be even for the timestep table");
  if (a.L < 2) fail(ErrorCode::invalid_argument, "sequence length L must be >= 2");
  if (a.variant == AdapterVariant::full && (a.heads < 1 || a.r % a.heads != 0))
    fail(ErrorCode::invalid_argument, "adapter r must be divisible by interaction heads");
  if (a.mlp_ratio < 1) fail(ErrorCode::invalid_argument, "interaction mlp ratio must be >= 1");
  const int nsites = backbone.kind == BackboneKind::transformer ? 2 * backbone.depth : backbone.depth;
  const int latter = backbone.depth / 2;  // first block of the latter half
  std::vector<int> s = a.sites.empty() ? default_sites(backbone) : a.sites;
  if (s.empty()) fail(ErrorCode::invalid_argument, "at least one adapter site is required");
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] < 0 || s[i] >= nsites) fail(ErrorCode::invalid_argument, "adapter site out of range");
    if (site_block(backbone, s[i]) < latter)
      fail(ErrorCode::invalid_argument, "adapter sites must lie in the latter half of the backbone");
    if (i > 0 && s[i] <= s[i - 1]) fail(ErrorCode::invalid_argument, "adapter sites must be strictly increasing");
  }
}

nlohmann::json to_json(const ModelConfig &c) {
  nlohmann::json j;
  j["kind"] = model_kind_name(c.kind);
  j["backbone"] = {{"kind", kind_name(c.backbone.kind)}, {"depth", c.backbone.depth},   {"dim", c.backbone.dim},
                   {"patch", c.backbone.patch},          {"heads", c.backbone.heads},   {"mlp_ratio", c.backbone.mlp_ratio},
                   {"image_size", c.backbone.image_size}, {"seed", c.backbone.seed}};
  j["adapter"] = {{"r", c.adapter.r},
                  {"L", c.adapter.L},
                  {"heads", c.adapter.heads},
                  {"mlp_ratio", c.adapter.mlp_ratio},
                  {"variant", variant_name(c.adapter.variant)},
                  {"sites", c.adapter.sites},
                  {"action_embed_per_site", c.adapter.action_embed_per_site},
                  {"timestep_per_site", c.adapter.timestep_per_site},
                  {"zero_init_up", c.adapter.zero_init_up}};
  j["seq_dim"] = c.seq_dim;
  j["hidden"] = c.hidden;
  j["output_scale"] = c.output_scale;
  j["finetune_all"] = c.finetune_all;
  j["train_last_block"] = c.train_last_block;
  j["seed"] = c.seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json &j) {
  ModelConfig c;
  try {
    // Every field is optional; missing ones keep their defaults.
    auto get = [](const nlohmann::json &o, const char *key, auto &dst) {
      if (o.contains(key)) dst = o.at(key).get<std::decay_t<decltype(dst)>>();
    };
    std::string s;
    if (j.contains("kind")) {
      s = j.at("kind").get<std::string>();
      if (s == "va_adapter") c.kind = ModelKind::va_adapter;
      else if (s == "single_frame") c.kind = ModelKind::single_frame;
      else fail(ErrorCode::invalid_argument, "unknown model kind '" + s + "'");
    }
    if (j.contains("backbone")) {
      const auto &b = j.at("backbone");
      if (b.contains("kind")) {
        s = b.at("kind").get<std::string>();
        if (s == "transformer") c.backbone.kind = BackboneKind::transformer;
        else if (s == "conv") c.backbone.kind = BackboneKind::conv;
        else fail(ErrorCode::invalid_argument, "unknown backbone kind '" + s + "'");
      }
      get(b, "depth", c.backbone.depth);
      get(b, "dim", c.backbone.dim);
      get(b, "patch", c.backbone.patch);
      get(b, "heads", c.backbone.heads);
      get(b, "mlp_ratio", c.backbone.mlp_ratio);
      get(b, "image_size", c.backbone.image_size);
      get(b, "seed", c.backbone.seed);
    }
    if (j.contains("adapter")) {
      const auto &a = j.at("adapter");
      get(a, "r", c.adapter.r);
      get(a, "L", c.adapter.L);
      get(a, "heads", c.adapter.heads);
      get(a, "mlp_ratio", c.adapter.mlp_ratio);
      if (a.contains("variant")) {
        s = a.at("variant").get<std::string>();
        if (s == "full") c.adapter.variant = AdapterVariant::full;
        else if (s == "vanilla") c.adapter.variant = AdapterVariant::vanilla;
        else fail(ErrorCode::invalid_argument, "unknown adapter variant '" + s + "'");
      }
      get(a, "sites", c.adapter.sites);
      get(a, "action_embed_per_site", c.adapter.action_embed_per_site);
      get(a, "timestep_per_site", c.adapter.timestep_per_site);
      get(a, "zero_init_up", c.adapter.zero_init_up);
    }
    get(j, "seq_dim", c.seq_dim);
    get(j, "hidden", c.hidden);
    get(j, "output_scale", c.output_scale);
    get(j, "finetune_all", c.finetune_all);
    get(j, "train_last_block", c.train_last_block);
    get(j, "seed", c.seed);
  } catch (const nlohmann::json::exception &e) {
    fail(ErrorCode::invalid_argument, std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor<double> timestep_embedding(int L, int r) {
  if (L < 1) fail(ErrorCode::invalid_argument, "timestep_embedding: L must be >= 1");
  if (r < 2 || r % 2 != 0) fail(ErrorCode::invalid_argument, "timestep_embedding: r must be even, got " + std::to_string(r));
  Tensor<double> t({static_cast<std::size_t>(L), static_cast<std::size_t>(r)});
  const int half = r / 2;
  for (int i = 0; i < L; ++i)
    for (int d = 0; d < half; ++d) {
      const double w = std::pow(10000.0, -2.0 * d / r);
      t.data[i * r + d] = std::sin(i * w);
      t.data[i * r + half + d] = std::cos(i * w);
    }
  return t;
}

// ---- model ----------------------------------------------------------------------

template <class T>
GuidanceModel<T>::GuidanceModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.kind == ModelKind::va_adapter) sites_ = cfg_.adapter.sites.empty() ? default_sites(cfg_.backbone) : cfg_.adapter.sites;
  build();
}

template <class T>
void GuidanceModel<T>::build() {
  const auto &bb = cfg_.backbone;
  const std::size_t C = static_cast<std::size_t>(bb.dim);
  const std::size_t P = static_cast<std::size_t>(bb.patch * bb.patch);
  const bool bb_train = cfg_.finetune_all;

  // Frozen encoder: scaled by fan-in so features stay informative without
  // pretraining.
  SplitMix64 bseeds(derive_seed(bb.seed, 0xB0));
  add_linear(params_, "backbone.patch", P, C, 1.0 / std::sqrt(double(P)), bseeds.next(), bb_train);
  params_.add("backbone.pos", sincos_2d(bb.grid(), bb.dim).cast<T>(), false);
  for (int b = 0; b < bb.depth; ++b) {
    const bool train_block = bb_train || (cfg_.kind == ModelKind::single_frame && cfg_.train_last_block && b == bb.depth - 1);
    const std::string name = block_prefix(b);
    if (bb.kind == BackboneKind::transformer) {
      add_transformer_block(params_, name.substr(0, name.size() - 1), C, bb.mlp_ratio, true, bseeds, train_block);
    } else {
      add_norm(params_, name + "ln", C, train_block);
      add_linear(params_, name + "conv", 9 * C, C, 1.0 / std::sqrt(9.0 * C), bseeds.next(), train_block);
      add_linear(params_, name + "pw", C, C, 1.0 / std::sqrt(double(C)), bseeds.next(), train_block);
    }
  }
  add_norm(params_, "backbone.norm", C, bb_train);

  SplitMix64 seeds(derive_seed(cfg_.seed, 0xAD));
  const std::size_t S = static_cast<std::size_t>(cfg_.seq_dim);
  const std::size_t Hd = static_cast<std::size_t>(cfg_.hidden);

  if (cfg_.kind == ModelKind::single_frame) {
    add_linear(params_, "head.proj", C, Hd, kInitStd, seeds.next(), true);
  } else {
    const auto &ad = cfg_.adapter;
    const std::size_t r = static_cast<std::size_t>(ad.r);
    const std::size_t L = static_cast<std::size_t>(ad.L);
    const auto table = timestep_embedding(ad.L, ad.r).cast<T>();
    if (!ad.timestep_per_site) params_.add("adapter.timestep", table, true);
    for (std::size_t i = 0; i < sites_.size(); ++i) {
      const std::string sp = site_prefix(sites_[i]);
      add_linear(params_, sp + "down", C, r, kInitStd, seeds.next(), true);
      if (i == 0 || ad.action_embed_per_site) add_linear(params_, sp + "action", 6, r, kInitStd, seeds.next(), true);
      if (ad.timestep_per_site) params_.add(sp + "timestep", table, true);
      if (ad.variant == AdapterVariant::full)
        add_transformer_block(params_, sp + "interaction", r, ad.mlp_ratio, false, seeds, true);
      add_linear(params_, sp + "up", r, C, ad.zero_init_up ? 0.0 : kInitStd, seeds.next(), true);
    }
    (void)L;
    params_.add("head.global_token", diff::init_trunc_normal<T>({r}, kInitStd, seeds.next()), true);
    add_linear(params_, "head.vis", C, S, kInitStd, seeds.next(), true);
    add_linear(params_, "head.act", r, S, kInitStd, seeds.next(), true);
    // The recurrent cell is not a fully connected layer; it keeps the usual
    // fan-in scale so its gates start outside the near-zero regime.
    const double gru_std = 1.0 / std::sqrt(static_cast<double>(Hd));
    params_.add("head.gru.wi", diff::init_trunc_normal<T>({2 * S, 3 * Hd}, gru_std, seeds.next()), true);
    params_.add("head.gru.bi", Tensor<T>({3 * Hd}), true);
    params_.add("head.gru.wh", diff::init_trunc_normal<T>({Hd, 3 * Hd}, gru_std, seeds.next()), true);
    params_.add("head.gru.bh", Tensor<T>({3 * Hd}), true);
  }
  for (int i = 0; i < kNumPlanes; ++i) {
    add_linear(params_, head_prefix(i) + "fc1", Hd, Hd, kInitStd, seeds.next(), true);
    add_linear(params_, head_prefix(i) + "fc2", Hd, 6, kInitStd, seeds.next(), true);
  }
}

template <class T>
int GuidanceModel<T>::first_live_block() const {
  if (cfg_.finetune_all) return 0;
  if (cfg_.kind == ModelKind::single_frame) return cfg_.train_last_block ? cfg_.backbone.depth - 1 : cfg_.backbone.depth;
  return site_block(cfg_.backbone, sites_.front());
}

namespace {

template <class T>
Tensor<T> patchify(const Tensor<T> &images, int patch) {
  if (images.rank() != 3 || images.dim(1) != images.dim(2))
    fail(ErrorCode::shape, "images must be [n, S, S], got " + diff::shape_str(images.shape));
  const std::size_t n = images.dim(0), S = images.dim(1), p = static_cast<std::size_t>(patch), g = S / p;
  Tensor<T> out({n, g * g, p * p});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) {
            const T v = images.data[(i * S + gy * p + y) * S + gx * p + x];
            out.data[((i * g * g) + gy * g + gx) * p * p + y * p + x] =
                static_cast<T>((static_cast<double>(v) - kPixelMean) / kPixelStd);
          }
  return out;
}

// Runs one backbone block, invoking `site(x, local)` after each insertion
// point (local 0 after attention / the conv block, 1 after the MLP).
template <class T, class Site>
DiffArray<T> backbone_block(const Net<T> &net, const BackboneConfig &bb, int b, DiffArray<T> x, Site &&site) {
  const std::string name = block_prefix(b);
  if (bb.kind == BackboneKind::transformer) {
    x = diff::add(x, net.attention(net.norm(x, name + "ln1"), name + "attn", bb.heads));
    x = site(x, 2 * b);
    x = diff::add(x, net.mlp(net.norm(x, name + "ln2"), name + "mlp"));
    return site(x, 2 * b + 1);
  }
  const std::size_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  auto h = net.norm(x, name + "ln");
  std::array<DiffArray<T>, 2> padded{h, net.tape.constant(Tensor<T>({B, 1, C}))};
  auto hp = diff::concat<T>(padded, 1);
  std::vector<DiffArray<T>> cols;
  for (const auto &idx : conv_offsets(bb.grid())) cols.push_back(diff::take(hp, 1, idx));
  auto col = diff::concat<T>(cols, 2);  // [B, N, 9C]
  (void)N;
  x = diff::add(x, net.linear(diff::gelu(net.linear(col, name + "conv")), name + "pw"));
  return site(x, b);
}

template <class T>
DiffArray<T> pool_tokens(const DiffArray<T> &x) {
  return diff::mean(x, 1);
}

}  // namespace

template <class T>
diff::Shape GuidanceModel<T>::prefix_row_shape() const {
  const auto &bb = cfg_.backbone;
  const std::size_t N = static_cast<std::size_t>(bb.tokens());
  if (cfg_.finetune_all) return {N, static_cast<std::size_t>(bb.patch * bb.patch)};
  return {N, static_cast<std::size_t>(bb.dim)};
}

template <class T>
Tensor<T> GuidanceModel<T>::prefix(const Tensor<T> &images) const {
  const auto &bb = cfg_.backbone;
  if (images.rank() != 3 || images.dim(1) != static_cast<std::size_t>(bb.image_size) ||
      images.dim(2) != static_cast<std::size_t>(bb.image_size))
    fail(ErrorCode::shape, "prefix: images must be [n, " + std::to_string(bb.image_size) + ", " +
                               std::to_string(bb.image_size) + "], got " + diff::shape_str(images.shape));
  auto patches = patchify(images, bb.patch);
  if (cfg_.finetune_all) return patches;
  Tape<T> tape(false);
  Net<T> net{tape, params_};
  auto x = diff::add(net.linear(tape.constant(std::move(patches)), "backbone.patch"), net.p("backbone.pos"));
  auto no_site = [](DiffArray<T> v, int) { return v; };
  for (int b = 0; b < first_live_block(); ++b) x = backbone_block(net, bb, b, x, no_site);
  return x.tensor();
}

template <class T>
Encoded<T> GuidanceModel<T>::encode(Tape<T> &tape, const Tensor<T> &prefix, const Tensor<T> &actions) const {
  const auto &bb = cfg_.backbone;
  const std::size_t F = static_cast<std::size_t>(cfg_.frames());
  const Shape row = prefix_row_shape();
  if (prefix.rank() != 3 || prefix.dim(1) != row[0] || prefix.dim(2) != row[1] || prefix.dim(0) % F != 0)
    fail(ErrorCode::shape, "encode: prefix must be [B*" + std::to_string(F) + ", " + std::to_string(row[0]) + ", " +
                               std::to_string(row[1]) + "], got " + diff::shape_str(prefix.shape));
  const std::size_t B = prefix.dim(0) / F;
  const std::size_t C = static_cast<std::size_t>(bb.dim);
  Net<T> net{tape, params_};

  DiffArray<T> x = tape.constant(prefix);
  if (cfg_.finetune_all) x = diff::add(net.linear(x, "backbone.patch"), net.p("backbone.pos"));

  Encoded<T> enc;
  if (cfg_.kind == ModelKind::single_frame) {
    auto no_site = [](DiffArray<T> v, int) { return v; };
    for (int b = first_live_block(); b < bb.depth; ++b) x = backbone_block(net, bb, b, x, no_site);
    enc.vision = diff::reshape(pool_tokens(net.norm(x, "backbone.norm")), {B, 1, C});
    return enc;
  }

  const auto &ad = cfg_.adapter;
  const std::size_t L = static_cast<std::size_t>(ad.L);
  const std::size_t r = static_cast<std::size_t>(ad.r);
  if (actions.shape != Shape{B, L - 1, 6})
    fail(ErrorCode::shape, "encode: actions must be [" + std::to_string(B) + ", " + std::to_string(L - 1) +
                               ", 6], got " + diff::shape_str(actions.shape));
  auto raw_actions = tape.constant(actions);
  std::vector<std::size_t> vis_rows(L), act_rows(L - 1), order;
  for (std::size_t i = 0; i < L; ++i) vis_rows[i] = i;
  for (std::size_t i = 0; i + 1 < L; ++i) act_rows[i] = i;
  // Interleaved [v1, a1, v2, ..., vL] over concat([v1..vL, a1..aL-1]).
  for (std::size_t i = 0; i < L; ++i) {
    order.push_back(i);
    if (i + 1 < L) order.push_back(L + i);
  }
  std::vector<std::size_t> out_vis, out_act;
  for (std::size_t i = 0; i < 2 * L - 1; ++i) (i % 2 == 0 ? out_vis : out_act).push_back(i);

  DiffArray<T> action_feats;
  std::size_t site_index = 0;
  auto site = [&](DiffArray<T> tokens, int s) -> DiffArray<T> {
    if (site_index >= sites_.size() || sites_[site_index] != s) return tokens;
    const std::string sp = site_prefix(s);
    const std::size_t k = site_index++;
    auto table = net.p(ad.timestep_per_site ? sp + "timestep" : "adapter.timestep");
    auto tv = diff::take(table, 0, vis_rows);
    auto f = diff::reshape(pool_tokens(tokens), {B, L, C});
    auto zv = diff::add(net.linear(f, sp + "down"), tv);
    DiffArray<T> za;
    if (k == 0 || ad.action_embed_per_site) {
      za = diff::add(net.linear(raw_actions, sp + "action"), diff::take(table, 0, act_rows));
    } else {
      za = action_feats;
    }
    DiffArray<T> hv;
    if (ad.variant == AdapterVariant::full) {
      std::array<DiffArray<T>, 2> streams{zv, za};
      auto seq = diff::take(diff::concat<T>(streams, 1), 1, order);
      auto out = net.transformer_block(seq, sp + "interaction", ad.heads);
      hv = diff::add(diff::take(out, 1, out_vis), zv);
      action_feats = diff::take(out, 1, out_act);
    } else {
      hv = zv;
      action_feats = za;
    }
    auto residual = net.linear(diff::relu(hv), sp + "up");  // [B, L, C]
    return diff::add(tokens, diff::reshape(residual, {B * L, 1, C}));
  };
  for (int b = first_live_block(); b < bb.depth; ++b) x = backbone_block(net, bb, b, x, site);
  if (site_index != sites_.size()) fail(ErrorCode::invalid_argument, "encode: not every adapter site was reached");
  enc.vision = diff::reshape(pool_tokens(net.norm(x, "backbone.norm")), {B, L, C});
  enc.action = action_feats;
  (void)r;
  return enc;
}

template <class T>
DiffArray<T> GuidanceModel<T>::forward(Tape<T> &tape, const Tensor<T> &prefix, const Tensor<T> &actions) const {
  Encoded<T> enc = encode(tape, prefix, actions);
  Net<T> net{tape, params_};
  const std::size_t B = enc.vision.dim(0);
  const std::size_t Hd = static_cast<std::size_t>(cfg_.hidden);
  DiffArray<T> h;
  if (cfg_.kind == ModelKind::single_frame) {
    h = net.linear(diff::reshape(enc.vision, {B, enc.vision.dim(2)}), "head.proj");
  } else {
    const std::size_t L = static_cast<std::size_t>(cfg_.adapter.L);
    const std::size_t r = static_cast<std::size_t>(cfg_.adapter.r);
    const std::size_t S = static_cast<std::size_t>(cfg_.seq_dim);
    auto vis = net.linear(enc.vision, "head.vis");  // [B, L, S]
    auto act = net.linear(enc.action, "head.act");  // [B, L-1, S]
    auto m = net.linear(diff::reshape(net.p("head.global_token"), {1, 1, r}), "head.act");
    auto m_b = diff::add(tape.constant(Tensor<T>({B, 1, S})), m);
    std::array<DiffArray<T>, 2> act_parts{act, m_b};
    auto act_seq = diff::concat<T>(act_parts, 1);  // [B, L, S]
    std::array<DiffArray<T>, 2> pair{vis, act_seq};
    auto seq = diff::concat<T>(pair, 2);  // [B, L, 2S]
    auto xs = diff::add(diff::matmul(seq, net.p("head.gru.wi")), net.p("head.gru.bi"));  // [B, L, 3H]
    auto steps = diff::split(xs, 1, std::vector<std::size_t>(L, 1));
    auto wh = net.p("head.gru.wh");
    auto bh = net.p("head.gru.bh");
    h = tape.constant(Tensor<T>({B, Hd}));
    const std::vector<std::size_t> thirds{Hd, Hd, Hd};
    for (std::size_t t = 0; t < L; ++t) {
      auto xi = diff::split(diff::reshape(steps[t], {B, 3 * Hd}), 1, thirds);
      auto hh = diff::split(diff::add(diff::matmul(h, wh), bh), 1, thirds);
      auto rg = diff::sigmoid(diff::add(xi[0], hh[0]));
      auto zg = diff::sigmoid(diff::add(xi[1], hh[1]));
      auto n = diff::tanh(diff::add(xi[2], diff::mul(rg, hh[2])));
      h = diff::add(n, diff::mul(zg, diff::sub(h, n)));
    }
  }
  std::vector<DiffArray<T>> outs;
  for (int i = 0; i < kNumPlanes; ++i) {
    auto o = net.linear(diff::gelu(net.linear(h, head_prefix(i) + "fc1")), head_prefix(i) + "fc2");
    outs.push_back(diff::reshape(o, {B, 1, 6}));
  }
  return diff::scale(diff::concat<T>(outs, 1), static_cast<T>(cfg_.output_scale));
}

template <class T>
Tensor<T> GuidanceModel<T>::backbone_features(const Tensor<T> &images) const {
  const auto &bb = cfg_.backbone;
  Tape<T> tape(false);
  Net<T> net{tape, params_};
  auto x = diff::add(net.linear(tape.constant(patchify(images, bb.patch)), "backbone.patch"), net.p("backbone.pos"));
  auto no_site = [](DiffArray<T> v, int) { return v; };
  for (int b = 0; b < bb.depth; ++b) x = backbone_block(net, bb, b, x, no_site);
  return pool_tokens(net.norm(x, "backbone.norm")).tensor();
}

template <class T>
std::array<Action6, kNumPlanes> GuidanceModel<T>::predict(const SequenceSample &sample) const {
  const int F = cfg_.frames();
  if (sample.length() < F) fail(ErrorCode::shape, "predict: sample shorter than the model's sequence length");
  if (cfg_.kind == ModelKind::va_adapter && sample.length() != F)
    fail(ErrorCode::shape, "predict: sample length " + std::to_string(sample.length()) + " differs from L = " +
                               std::to_string(F));
  std::vector<const SliceImage *> imgs;
  for (int i = sample.length() - F; i < sample.length(); ++i) imgs.push_back(&sample.images[i]);
  std::vector<Action6> acts;
  if (cfg_.kind == ModelKind::va_adapter) acts = sample.actions;
  Tape<T> tape(false);
  auto out = forward(tape, prefix(stack_images<T>(imgs)), stack_actions<T>(acts));
  std::array<Action6, kNumPlanes> res;
  const auto &v = out.value();
  for (int i = 0; i < kNumPlanes; ++i) {
    std::array<double, 6> a{};
    for (int d = 0; d < 6; ++d) a[d] = static_cast<double>(v[i * 6 + d]);
    res[i] = Action6::from_array(a);
  }
  return res;
}

template <class T>
ParamCounts GuidanceModel<T>::count_params() const {
  ParamCounts c;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto &p = params_[i];
    (p.trainable ? c.trainable : c.frozen) += p.value.size();
    c.by_component[component_of(p.name)] += p.value.size();
  }
  return c;
}

// ---- checkpoints --------------------------------------------------------------

template <class T>
void GuidanceModel<T>::save(const std::filesystem::path &path) const {
  io::ByteWriter body;
  const std::string header = to_json(cfg_).dump();
  body.u32(static_cast<std::uint32_t>(header.size()));
  body.str(header);
  body.u32(static_cast<std::uint32_t>(params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto &p = params_[i];
    body.u32(static_cast<std::uint32_t>(p.name.size()));
    body.str(p.name);
    diff::write_array(body, p.value);
  }
  io::ByteWriter w;
  w.bytes(std::as_bytes(std::span(kCheckpointMagic)));
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(body.size()));
  w.bytes(body.data());
  w.u32(crc32c(body.data()));
  io::write_file(path, w.data());
}

namespace {

struct CheckpointBody {
  ModelConfig config;
  std::vector<std::byte> bytes;
  std::size_t weights_offset = 0;
};

CheckpointBody read_checkpoint(const std::filesystem::path &path) {
  const auto bytes = io::read_file(path);
  const std::string where = path.string();
  io::ByteReader r(bytes, where);
  if (r.remaining() < 4) fail(ErrorCode::truncated, where + ": truncated before magic");
  if (r.str(4) != std::string_view(kCheckpointMagic, 4)) fail(ErrorCode::format, where + ": not a checkpoint (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    fail(ErrorCode::format, where + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t body_len = r.u32();
  if (r.remaining() < static_cast<std::size_t>(body_len) + 4)
    fail(ErrorCode::truncated, where + ": file shorter than its declared length");
  auto body = r.bytes(body_len);
  const std::uint32_t stored = r.u32();
  if (crc32c(body) != stored) fail(ErrorCode::checksum, where + ": checksum mismatch");
  if (r.remaining() != 0) fail(ErrorCode::format, where + ": trailing bytes after checksum");

  CheckpointBody out;
  out.bytes.assign(body.begin(), body.end());
  io::ByteReader br(out.bytes, where);
  const std::uint32_t hlen = br.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(br.str(hlen));
  } catch (const nlohmann::json::exception &e) {
    fail(ErrorCode::format, where + ": malformed config header: " + e.what());
  }
  try {
    out.config = model_config_from_json(header);
  } catch (const Error &e) {
    fail(ErrorCode::format, where + ": " + e.what());
  }
  out.weights_offset = br.position();
  return out;
}

template <class T>
void read_weights(const CheckpointBody &ck, diff::ParamStore<T> &params, const std::string &where) {
  io::ByteReader br(ck.bytes, where);
  br.bytes(ck.weights_offset);
  const std::uint32_t count = br.u32();
  if (count != params.size())
    fail(ErrorCode::format, where + ": checkpoint holds " + std::to_string(count) + " parameters, model has " +
                                std::to_string(params.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = br.str(br.u32());
    if (!params.contains(name)) fail(ErrorCode::format, where + ": unknown parameter " + name);
    auto &p = params.at(name);
    auto value = diff::read_array<T>(br);
    if (value.shape != p.value.shape)
      fail(ErrorCode::format, where + ": shape mismatch for " + name + ": " + diff::shape_str(value.shape) + " vs " +
                                  diff::shape_str(p.value.shape));
    p.value = std::move(value);
  }
}

}  // namespace

template <class T>
GuidanceModel<T> GuidanceModel<T>::load(const std::filesystem::path &path) {
  auto ck = read_checkpoint(path);
  GuidanceModel<T> model(ck.config);
  read_weights(ck, model.params_, path.string());
  return model;
}

template <class T>
void GuidanceModel<T>::load_weights(const std::filesystem::path &path) {
  auto ck = read_checkpoint(path);
  if (to_json(ck.config) != to_json(cfg_))
    fail(ErrorCode::invalid_argument, path.string() + ": checkpoint config does not match the model");
  read_weights(ck, params_, path.string());
}

template <class T>
Tensor<T> stack_images(const std::vector<const SliceImage *> &images) {
  if (images.empty()) fail(ErrorCode::invalid_argument, "stack_images: no images");
  const int w = images.front()->width, h = images.front()->height;
  Tensor<T> out({images.size(), static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  std::size_t o = 0;
  for (const auto *img : images) {
    if (img->width != w || img->height != h) fail(ErrorCode::shape, "stack_images: image sizes differ");
    for (float v : img->data) out.data[o++] = static_cast<T>(v);
  }
  return out;
}

template <class T>
Tensor<T> stack_actions(const std::vector<Action6> &actions) {
  Tensor<T> out({1, actions.size(), 6});
  for (std::size_t i = 0; i < actions.size(); ++i)
    for (int d = 0; d < 6; ++d) out.data[i * 6 + d] = static_cast<T>(actions[i][d]);
  return out;
}

template class GuidanceModel<float>;
template class GuidanceModel<double>;
template Tensor<float> stack_images<float>(const std::vector<const SliceImage *> &);
template Tensor<double> stack_images<double>(const std::vector<const SliceImage *> &);
template Tensor<float> stack_actions<float>(const std::vector<Action6> &);
template Tensor<double> stack_actions<double>(const std::vector<Action6> &);

}  // namespace vaguide
