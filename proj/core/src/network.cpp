#include "tcpdiff/network.hpp"

#include <cmath>
#include <numeric>

#include "json.hpp"
#include "tcpdiff/datasets.hpp"
#include "tcpdiff/error.hpp"
#include "tcpdiff/io.hpp"
#include "tcpdiff/rng.hpp"

namespace tcpdiff::nn {

using nlohmann::json;

// ---- config ----------------------------------------------------------------------

void NetworkConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("network config: " + msg); };
  if (depth < 1) fail("depth K must be at least 1");
  if (channel_mult.size() != depth)
    fail("channel_mult has " + std::to_string(channel_mult.size()) + " entries for depth " + std::to_string(depth));
  if (base_channels < 1 || scalar_width < 1 || future_width < 1 || step_width < 1 || future_base < 1 || heads < 1 ||
      norm_groups < 1 || future_stages < 1 || attn_max_tokens < 1)
    fail("widths must be at least 1");
  if (n < 1 || m < 1) fail("n and m must be at least 1");
  if (n != m) fail("the noised target is aligned per time step, so n must equal m");
  const std::size_t div = std::size_t{1} << depth;
  if (grid % div != 0)
    fail("grid " + std::to_string(grid) + " is not divisible by 2^K = " + std::to_string(div));
  if (grid % (std::size_t{1} << (future_stages - 1)) != 0) fail("grid not divisible by future-encoder downsampling");
  if (step_width % 2 != 0 || scalar_width % 2 != 0) fail("sinusoidal embedding widths must be even");
  for (std::size_t i = 0; i <= depth; ++i) {
    const std::size_t c = level_channels(i);
    if (c % norm_groups != 0) fail("level channels " + std::to_string(c) + " not divisible by norm_groups");
    if (c % heads != 0) fail("level channels " + std::to_string(c) + " not divisible by heads");
  }
  for (std::size_t j = 0; j < future_stages; ++j)
    if ((future_base << j) % norm_groups != 0) fail("future encoder channels not divisible by norm_groups");
}

std::size_t NetworkConfig::level_channels(std::size_t i) const {
  return i == 0 ? base_channels : base_channels * channel_mult.at(i - 1);
}

std::size_t NetworkConfig::cond_width() const {
  return (use_multimodal ? scalar_width : 0) + (use_future ? future_width : 0) + step_width;
}

std::size_t NetworkConfig::his2d_context_channels() const {
  std::size_t c = 1;  // rainfall
  if (use_arp) c += 1;
  if (use_multimodal) c += data::kSurfaceCount + data::kLevelVarCount * data::kLevelCount;
  return c;
}

std::size_t NetworkConfig::max_depth_for(std::size_t grid, std::size_t limit) {
  std::size_t k = 0;
  while (k < limit && grid % (std::size_t{2} << k) == 0) ++k;
  return std::max<std::size_t>(k, 1);
}

std::string NetworkConfig::to_json() const {
  json j{{"grid", grid},
         {"n", n},
         {"m", m},
         {"scalar_channels", scalar_channels},
         {"future_channels", future_channels},
         {"depth", depth},
         {"base_channels", base_channels},
         {"channel_mult", channel_mult},
         {"heads", heads},
         {"norm_groups", norm_groups},
         {"attn_max_tokens", attn_max_tokens},
         {"scalar_width", scalar_width},
         {"future_width", future_width},
         {"step_width", step_width},
         {"future_base", future_base},
         {"future_stages", future_stages},
         {"use_arp", use_arp},
         {"use_multimodal", use_multimodal},
         {"use_future", use_future}};
  return j.dump();
}

NetworkConfig NetworkConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  NetworkConfig c;
  c.grid = j.value("grid", c.grid);
  c.n = j.value("n", c.n);
  c.m = j.value("m", c.m);
  c.scalar_channels = j.value("scalar_channels", c.scalar_channels);
  c.future_channels = j.value("future_channels", c.future_channels);
  c.depth = j.value("depth", c.depth);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_mult = j.value("channel_mult", c.channel_mult);
  c.heads = j.value("heads", c.heads);
  c.norm_groups = j.value("norm_groups", c.norm_groups);
  c.attn_max_tokens = j.value("attn_max_tokens", c.attn_max_tokens);
  c.scalar_width = j.value("scalar_width", c.scalar_width);
  c.future_width = j.value("future_width", c.future_width);
  c.step_width = j.value("step_width", c.step_width);
  c.future_base = j.value("future_base", c.future_base);
  c.future_stages = j.value("future_stages", c.future_stages);
  c.use_arp = j.value("use_arp", c.use_arp);
  c.use_multimodal = j.value("use_multimodal", c.use_multimodal);
  c.use_future = j.value("use_future", c.use_future);
  return c;
}

NetworkConfig NetworkConfig::tiny(std::size_t grid) {
  NetworkConfig c;
  c.grid = grid;
  c.depth = std::min<std::size_t>(2, max_depth_for(grid));
  c.base_channels = 8;
  c.channel_mult.assign(c.depth, 2);
  c.channel_mult[0] = 1;
  if (c.depth > 1) c.channel_mult[1] = 2;
  c.norm_groups = 4;
  c.scalar_width = 16;
  c.future_width = 16;
  c.step_width = 16;
  c.future_base = 8;
  c.future_stages = 2;
  return c;
}

NetworkConfig NetworkConfig::smallest() {
  NetworkConfig c;
  c.grid = 8;
  c.n = c.m = 2;
  c.depth = 1;
  c.base_channels = 4;
  c.channel_mult = {1};
  c.norm_groups = 2;
  c.attn_max_tokens = 16;
  c.scalar_width = 4;
  c.future_width = 4;
  c.step_width = 4;
  c.future_base = 2;
  c.future_stages = 2;
  return c;
}

// ---- parameters ------------------------------------------------------------------

template <class T>
std::size_t ParamStore<T>::add(std::string name, BasicTensor<T> value) {
  for (const auto& n : names)
    if (n == name) throw ConfigError("duplicate parameter " + name);
  names.push_back(std::move(name));
  values.push_back(std::move(value));
  return names.size() - 1;
}

template <class T>
std::size_t ParamStore<T>::index(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw RangeError("no parameter named " + std::string(name));
}

template <class T>
std::size_t ParamStore<T>::count() const {
  std::size_t c = 0;
  for (const auto& v : values) c += v.size();
  return c;
}

template <class T>
std::size_t ParamStore<T>::count(std::string_view prefix) const {
  std::size_t c = 0;
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i].starts_with(prefix)) c += values[i].size();
  return c;
}

template <class T>
bool ParamStore<T>::has_prefix(std::string_view prefix) const {
  for (const auto& n : names)
    if (n.starts_with(prefix)) return true;
  return false;
}

template <class T>
bool ParamStore<T>::all_finite() const {
  for (const auto& v : values)
    if (!v.all_finite()) return false;
  return true;
}

template <class T>
BasicTensor<T> sinusoidal_embedding(std::size_t position, std::size_t width) {
  BasicTensor<T> out({width});
  const std::size_t half = width / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(std::max<std::size_t>(half, 1)));
    out[k] = static_cast<T>(std::sin(static_cast<double>(position) * freq));
    out[half + k] = static_cast<T>(std::cos(static_cast<double>(position) * freq));
  }
  return out;
}

// ---- construction ----------------------------------------------------------------

template <class T>
Network<T>::Network(NetworkConfig config, InitOptions init) : config_(std::move(config)) {
  config_.validate();
  build(init.seed, init.zero_output_head);
}

template <class T>
Network<T>::Network(NetworkConfig config, ParamStore<T> params) : config_(std::move(config)) {
  config_.validate();
  build(0, true);
  if (params.names != params_.names)
    throw CorruptionError("parameter list does not match the network configuration");
  for (std::size_t i = 0; i < params.values.size(); ++i)
    if (params.values[i].shape != params_.values[i].shape)
      throw CorruptionError("parameter " + params.names[i] + " has shape " + shape_str(params.values[i].shape) +
                            ", configuration implies " + shape_str(params_.values[i].shape));
  params_ = std::move(params);
}

template <class T>
void Network<T>::build(std::uint64_t seed, bool zero_head) {
  Rng rng(seed);
  params_ = {};
  auto normal = [&](Shape shape, double std) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(std * rng.normal());
    return t;
  };
  // Variance scaling on fan-in.
  auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t kd, std::size_t kh,
                  std::size_t kw, bool bias = true) {
    params_.add(name + ".w", normal({cout, cin, kd, kh, kw}, std::sqrt(1.0 / static_cast<double>(cin * kd * kh * kw))));
    if (bias) params_.add(name + ".b", BasicTensor<T>({cout}));
  };
  auto lin = [&](const std::string& name, std::size_t out, std::size_t in) {
    params_.add(name + ".w", normal({out, in}, std::sqrt(1.0 / static_cast<double>(in))));
    params_.add(name + ".b", BasicTensor<T>({out}));
  };
  auto norm = [&](const std::string& name, std::size_t c) {
    params_.add(name + ".gamma", BasicTensor<T>({c}, T{1}));
    params_.add(name + ".beta", BasicTensor<T>({c}));
  };
  const auto& c = config_;
  const std::size_t cond = c.cond_width();
  auto res = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    conv(name + ".conv1", cout, cin, 3, 3, 3);
    norm(name + ".gn1", cout);
    lin(name + ".cond", cout, cond);
    conv(name + ".conv2", cout, cout, 3, 3, 3);
    norm(name + ".gn2", cout);
    if (cin != cout) conv(name + ".skip", cout, cin, 1, 1, 1);
  };
  auto attn = [&](const std::string& name, std::size_t ch) {
    norm(name + ".gn", ch);
    for (const char* p : {".q", ".k", ".v", ".o"}) conv(name + p, ch, ch, 1, 1, 1);
  };
  auto module = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    res(name + ".res", cin, cout);
    attn(name + ".sa", cout);
    attn(name + ".ta", cout);
  };

  const std::size_t c0 = c.base_channels;
  conv("his2d.ctx", c0, c.his2d_context_channels(), 3, 3, 3);
  conv("his2d.noise", c0, 1, 3, 3, 3, false);

  if (c.use_multimodal) {
    const std::size_t e = c.scalar_width;
    lin("scalar.mlp1", e, c.scalar_channels);
    lin("scalar.mlp2", e, e);
    for (const char* p : {".q", ".k", ".v", ".o"}) lin(std::string("scalar.attn") + p, e, e);
    lin("scalar.ffn1", 2 * e, e);
    lin("scalar.ffn2", e, 2 * e);
    lin("scalar.head", c.scalar_width, e);
  }
  if (c.use_future) {
    conv("future.stem", c.future_base, c.m * c.future_channels, 1, 3, 3);
    norm("future.stem.gn", c.future_base);
    std::size_t cin = c.future_base;
    for (std::size_t j = 0; j < c.future_stages; ++j) {
      const std::size_t cout = c.future_base << j;
      const std::string s = "future.s" + std::to_string(j);
      conv(s + ".conv1", cout, cin, 1, 3, 3);
      norm(s + ".gn1", cout);
      conv(s + ".conv2", cout, cout, 1, 3, 3);
      norm(s + ".gn2", cout);
      if (cin != cout) conv(s + ".skip", cout, cin, 1, 1, 1);
      cin = cout;
    }
    lin("future.head", c.future_width, cin);
  }
  lin("step.mlp1", c.step_width, c.step_width);
  lin("step.mlp2", c.step_width, c.step_width);

  for (std::size_t i = 1; i <= c.depth; ++i)
    module("unet.en" + std::to_string(i), c.level_channels(i - 1), c.level_channels(i));
  module("unet.neck", c.level_channels(c.depth), c.level_channels(c.depth));
  for (std::size_t i = c.depth; i >= 1; --i)
    module("unet.de" + std::to_string(i), 2 * c.level_channels(i), c.level_channels(i - 1));
  res("unet.out.res", 2 * c0, c0);
  norm("unet.out.gn", c0);
  conv("unet.out.conv", 1, c0, 3, 3, 3);
  if (zero_head) {
    for (auto& v : params_.values[params_.index("unet.out.conv.w")].data) v = T{0};
  }
}

// ---- graph construction ----------------------------------------------------------

template <class T>
const Var<T>& Network<T>::P(const std::vector<Var<T>>& p, const std::string& name) const {
  return p[params_.index(name)];
}

template <class T>
std::vector<Var<T>> Network<T>::bind(Graph<T>& g, bool trainable) const {
  std::vector<Var<T>> out;
  out.reserve(params_.values.size());
  for (const auto& v : params_.values) out.push_back(trainable ? g.leaf(v) : g.constant(v));
  return out;
}

template <class T>
void Network<T>::check_inputs(const ModelInputs<T>& in) const {
  const auto& c = config_;
  const std::size_t h = c.grid;
  auto check = [](const BasicTensor<T>& t, const Shape& want, const char* name) {
    if (t.shape != want)
      throw ShapeError(std::string(name) + " input has shape " + shape_str(t.shape) + ", expected " + shape_str(want));
  };
  check(in.rain, {c.n, h, h}, "rain");
  if (c.use_arp) check(in.deltas, {c.n, h, h}, "deltas");
  if (c.use_multimodal) {
    check(in.sfc, {c.n, data::kSurfaceCount, h, h}, "sfc_env");
    check(in.pl, {c.n, data::kLevelVarCount, data::kLevelCount, h, h}, "pl_env");
    check(in.scalars, {c.n, c.scalar_channels}, "scalars");
  }
  if (c.use_future) check(in.future, {c.m, c.future_channels, h, h}, "future_nwp");
}

template <class T>
Var<T> Network<T>::his_context_graph(Graph<T>& g, const std::vector<Var<T>>& p, const ModelInputs<T>& in) const {
  const auto& c = config_;
  const std::size_t hw = c.grid * c.grid, n = c.n;
  BasicTensor<T> x({c.his2d_context_channels(), n, c.grid, c.grid});
  std::size_t ch = 0;
  // Time-major [n, k, H, W] group -> channel-major rows of x.
  auto put = [&](const BasicTensor<T>& src, std::size_t k) {
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < k; ++j)
        std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>((t * k + j) * hw), hw,
                    x.data.begin() + static_cast<std::ptrdiff_t>(((ch + j) * n + t) * hw));
    ch += k;
  };
  put(in.rain, 1);
  if (c.use_arp) put(in.deltas, 1);
  if (c.use_multimodal) {
    put(in.sfc, data::kSurfaceCount);
    put(in.pl, data::kLevelVarCount * data::kLevelCount);
  }
  const Var<T> xv = g.constant(std::move(x));
  return conv3d(xv, P(p, "his2d.ctx.w"), &P(p, "his2d.ctx.b"));
}

template <class T>
Var<T> Network<T>::his2d_features(Graph<T>& g, const std::vector<Var<T>>& p, Var<T> his_context,
                                  Var<T> noised) const {
  (void)g;
  const auto& c = config_;
  if (noised.shape() != Shape{c.m, c.grid, c.grid})
    throw ShapeError("noised target has shape " + shape_str(noised.shape()) + ", expected " +
                     shape_str({c.m, c.grid, c.grid}));
  const Var<T> nz = reshape(noised, {1, c.m, c.grid, c.grid});
  return silu(add(his_context, conv3d(nz, P(p, "his2d.noise.w"), static_cast<const Var<T>*>(nullptr))));
}

template <class T>
Var<T> Network<T>::scalar_graph(Graph<T>& g, const std::vector<Var<T>>& p, const BasicTensor<T>& scalars) const {
  const auto& c = config_;
  const std::size_t e = c.scalar_width;
  Var<T> x = g.constant(scalars);
  Var<T> h = dense(silu(dense(x, P(p, "scalar.mlp1.w"), P(p, "scalar.mlp1.b"))), P(p, "scalar.mlp2.w"),
                   P(p, "scalar.mlp2.b"));
  BasicTensor<T> pos({c.n, e});
  for (std::size_t t = 0; t < c.n; ++t) {
    const auto emb = sinusoidal_embedding<T>(t, e);
    std::copy(emb.data.begin(), emb.data.end(), pos.data.begin() + static_cast<std::ptrdiff_t>(t * e));
  }
  h = add(h, g.constant(std::move(pos)));
  auto proj = [&](const char* name) {
    return reshape(dense(h, P(p, std::string("scalar.attn.") + name + ".w"), P(p, std::string("scalar.attn.") + name + ".b")),
                   {1, c.n, e});
  };
  Var<T> a = reshape(attention(proj("q"), proj("k"), proj("v")), {c.n, e});
  h = add(h, dense(a, P(p, "scalar.attn.o.w"), P(p, "scalar.attn.o.b")));
  Var<T> f = dense(silu(dense(h, P(p, "scalar.ffn1.w"), P(p, "scalar.ffn1.b"))), P(p, "scalar.ffn2.w"),
                   P(p, "scalar.ffn2.b"));
  h = add(h, f);
  return dense(mean0(h), P(p, "scalar.head.w"), P(p, "scalar.head.b"));
}

template <class T>
Var<T> Network<T>::future_graph(Graph<T>& g, const std::vector<Var<T>>& p, const BasicTensor<T>& future) const {
  const auto& c = config_;
  // [m, Cf, H, W] is already [m*Cf, 1, H, W] in memory.
  Var<T> x = g.constant(BasicTensor<T>({c.m * c.future_channels, 1, c.grid, c.grid}, future.data));
  const std::size_t G = c.norm_groups;
  Var<T> h = silu(group_norm(conv3d(x, P(p, "future.stem.w"), &P(p, "future.stem.b")), P(p, "future.stem.gn.gamma"),
                             P(p, "future.stem.gn.beta"), G));
  for (std::size_t j = 0; j < c.future_stages; ++j) {
    const std::string s = "future.s" + std::to_string(j);
    if (j > 0) h = avg_pool2d(h, 2);
    Var<T> r = silu(group_norm(conv3d(h, P(p, s + ".conv1.w"), &P(p, s + ".conv1.b")), P(p, s + ".gn1.gamma"),
                               P(p, s + ".gn1.beta"), G));
    r = group_norm(conv3d(r, P(p, s + ".conv2.w"), &P(p, s + ".conv2.b")), P(p, s + ".gn2.gamma"),
                   P(p, s + ".gn2.beta"), G);
    const Var<T> skip = params_.has_prefix(s + ".skip.") ? conv3d(h, P(p, s + ".skip.w"), &P(p, s + ".skip.b")) : h;
    h = silu(add(r, skip));
  }
  return dense(mean_trailing(h), P(p, "future.head.w"), P(p, "future.head.b"));
}

template <class T>
Var<T> Network<T>::cond_vector(Graph<T>& g, const std::vector<Var<T>>& p, const Context& ctx,
                               std::size_t step) const {
  Var<T> s = g.constant(sinusoidal_embedding<T>(step, config_.step_width));
  s = dense(silu(dense(s, P(p, "step.mlp1.w"), P(p, "step.mlp1.b"))), P(p, "step.mlp2.w"), P(p, "step.mlp2.b"));
  Var<T> cond = s;
  if (ctx.has_future) cond = concat0(ctx.e_future, cond);
  if (ctx.has_scalar) cond = concat0(ctx.e_scalar, cond);
  return cond;
}

template <class T>
Var<T> Network<T>::res_block(const std::vector<Var<T>>& p, const std::string& name, Var<T> x, Var<T> cond) const {
  const std::size_t G = config_.norm_groups;
  Var<T> h = conv3d(x, P(p, name + ".conv1.w"), &P(p, name + ".conv1.b"));
  h = silu(group_norm(h, P(p, name + ".gn1.gamma"), P(p, name + ".gn1.beta"), G));
  h = add_channel_bias(h, dense(cond, P(p, name + ".cond.w"), P(p, name + ".cond.b")));
  h = conv3d(h, P(p, name + ".conv2.w"), &P(p, name + ".conv2.b"));
  h = silu(group_norm(h, P(p, name + ".gn2.gamma"), P(p, name + ".gn2.beta"), G));
  const Var<T> skip =
      params_.has_prefix(name + ".skip.") ? conv3d(x, P(p, name + ".skip.w"), &P(p, name + ".skip.b")) : x;
  return add(h, skip);
}

namespace {

// Smallest divisor f of `side` with (side/f)^2 <= max_tokens.
std::size_t pool_factor(std::size_t side, std::size_t max_tokens) {
  for (std::size_t f = 1; f <= side; ++f)
    if (side % f == 0 && (side / f) * (side / f) <= max_tokens) return f;
  return side;
}

}  // namespace

template <class T>
Var<T> Network<T>::spatial_attention(const std::vector<Var<T>>& p, const std::string& name, Var<T> x) const {
  const Shape s = x.shape();  // [C, D, H, W]
  const std::size_t C = s[0], D = s[1], H = s[2], W = s[3], heads = config_.heads, dh = C / heads;
  const Var<T> xn = group_norm(x, P(p, name + ".gn.gamma"), P(p, name + ".gn.beta"), config_.norm_groups);
  const std::size_t f = pool_factor(H, config_.attn_max_tokens);
  const Var<T> kv_src = avg_pool2d(xn, f);
  const std::size_t keys = (H / f) * (W / f);
  auto split = [&](Var<T> t, std::size_t len) {
    return reshape(permute(reshape(t, {heads, dh, D, len}), {2, 0, 3, 1}), {D * heads, len, dh});
  };
  const Var<T> q = split(conv3d(xn, P(p, name + ".q.w"), &P(p, name + ".q.b")), H * W);
  const Var<T> k = split(conv3d(kv_src, P(p, name + ".k.w"), &P(p, name + ".k.b")), keys);
  const Var<T> v = split(conv3d(kv_src, P(p, name + ".v.w"), &P(p, name + ".v.b")), keys);
  Var<T> o = reshape(attention(q, k, v), {D, heads, H * W, dh});
  o = reshape(permute(o, {1, 3, 0, 2}), {C, D, H, W});
  return add(x, conv3d(o, P(p, name + ".o.w"), &P(p, name + ".o.b")));
}

template <class T>
Var<T> Network<T>::temporal_attention(const std::vector<Var<T>>& p, const std::string& name, Var<T> x) const {
  const Shape s = x.shape();
  const std::size_t C = s[0], D = s[1], H = s[2], W = s[3], heads = config_.heads, dh = C / heads, hw = H * W;
  const Var<T> xn = group_norm(x, P(p, name + ".gn.gamma"), P(p, name + ".gn.beta"), config_.norm_groups);
  auto split = [&](Var<T> t) {
    return reshape(permute(reshape(t, {heads, dh, D, hw}), {3, 0, 2, 1}), {hw * heads, D, dh});
  };
  const Var<T> q = split(conv3d(xn, P(p, name + ".q.w"), &P(p, name + ".q.b")));
  const Var<T> k = split(conv3d(xn, P(p, name + ".k.w"), &P(p, name + ".k.b")));
  const Var<T> v = split(conv3d(xn, P(p, name + ".v.w"), &P(p, name + ".v.b")));
  Var<T> o = reshape(attention(q, k, v), {hw, heads, D, dh});
  o = reshape(permute(o, {1, 3, 2, 0}), {C, D, H, W});
  return add(x, conv3d(o, P(p, name + ".o.w"), &P(p, name + ".o.b")));
}

template <class T>
Var<T> Network<T>::unet_module(const std::vector<Var<T>>& p, const std::string& name, Var<T> x, Var<T> cond) const {
  Var<T> h = res_block(p, name + ".res", x, cond);
  h = spatial_attention(p, name + ".sa", h);
  return temporal_attention(p, name + ".ta", h);
}

template <class T>
typename Network<T>::Context Network<T>::encode(Graph<T>& g, const std::vector<Var<T>>& p,
                                                const ModelInputs<T>& in) const {
  check_inputs(in);
  Context ctx;
  ctx.his_context = his_context_graph(g, p, in);
  if (config_.use_multimodal) {
    ctx.e_scalar = scalar_graph(g, p, in.scalars);
    ctx.has_scalar = true;
  }
  if (config_.use_future) {
    ctx.e_future = future_graph(g, p, in.future);
    ctx.has_future = true;
  }
  return ctx;
}

template <class T>
typename Network<T>::Context Network<T>::bind_context(Graph<T>& g, const EncodedContext<T>& enc) const {
  Context ctx;
  ctx.his_context = g.constant(enc.his_context);
  if (config_.use_multimodal) {
    ctx.e_scalar = g.constant(enc.e_scalar);
    ctx.has_scalar = true;
  }
  if (config_.use_future) {
    ctx.e_future = g.constant(enc.e_future);
    ctx.has_future = true;
  }
  return ctx;
}

template <class T>
Var<T> Network<T>::denoise(Graph<T>& g, const std::vector<Var<T>>& p, const Context& ctx, Var<T> noised,
                           std::size_t step) const {
  const auto& c = config_;
  const Var<T> e0 = his2d_features(g, p, ctx.his_context, noised);
  const Var<T> cond = cond_vector(g, p, ctx, step);
  Var<T> h = e0;
  std::vector<Var<T>> skips;
  for (std::size_t i = 1; i <= c.depth; ++i) {
    h = avg_pool2d(unet_module(p, "unet.en" + std::to_string(i), h, cond), 2);
    skips.push_back(h);
  }
  h = unet_module(p, "unet.neck", h, cond);
  for (std::size_t i = c.depth; i >= 1; --i) {
    h = concat0(h, skips[i - 1]);
    h = upsample2d(unet_module(p, "unet.de" + std::to_string(i), h, cond), 2);
  }
  h = res_block(p, "unet.out.res", concat0(h, e0), cond);
  h = silu(group_norm(h, P(p, "unet.out.gn.gamma"), P(p, "unet.out.gn.beta"), c.norm_groups));
  h = conv3d(h, P(p, "unet.out.conv.w"), &P(p, "unet.out.conv.b"));
  return reshape(h, {c.m, c.grid, c.grid});
}

// ---- inference helpers -----------------------------------------------------------

template <class T>
EncodedContext<T> Network<T>::encode_context(const ModelInputs<T>& in) const {
  Graph<T> g(false);
  const auto p = bind(g, false);
  const Context ctx = encode(g, p, in);
  EncodedContext<T> out;
  out.his_context = ctx.his_context.value();
  if (ctx.has_scalar) out.e_scalar = ctx.e_scalar.value();
  if (ctx.has_future) out.e_future = ctx.e_future.value();
  return out;
}

template <class T>
BasicTensor<T> Network<T>::predict_noise(const EncodedContext<T>& enc, const BasicTensor<T>& noised,
                                         std::size_t step) const {
  Graph<T> g(false);
  const auto p = bind(g, false);
  const Context ctx = bind_context(g, enc);
  return denoise(g, p, ctx, g.constant(noised), step).value();
}

template <class T>
BasicTensor<T> Network<T>::predict_noise(const ModelInputs<T>& in, const BasicTensor<T>& noised,
                                         std::size_t step) const {
  Graph<T> g(false);
  const auto p = bind(g, false);
  const Context ctx = encode(g, p, in);
  return denoise(g, p, ctx, g.constant(noised), step).value();
}

template <class T>
BasicTensor<T> Network<T>::encode_his2d(const ModelInputs<T>& in, const BasicTensor<T>& noised) const {
  check_inputs(in);
  Graph<T> g(false);
  const auto p = bind(g, false);
  return his2d_features(g, p, his_context_graph(g, p, in), g.constant(noised)).value();
}

template <class T>
BasicTensor<T> Network<T>::encode_scalars(const BasicTensor<T>& scalars) const {
  if (!config_.use_multimodal) throw ConfigError("scalar encoder is disabled (multimodal toggle off)");
  if (scalars.shape != Shape{config_.n, config_.scalar_channels})
    throw ShapeError("scalars input has shape " + shape_str(scalars.shape));
  Graph<T> g(false);
  const auto p = bind(g, false);
  return scalar_graph(g, p, scalars).value();
}

template <class T>
BasicTensor<T> Network<T>::encode_future(const BasicTensor<T>& future) const {
  if (!config_.use_future) throw ConfigError("future encoder is disabled (future toggle off)");
  if (future.shape != Shape{config_.m, config_.future_channels, config_.grid, config_.grid})
    throw ShapeError("future_nwp input has shape " + shape_str(future.shape));
  Graph<T> g(false);
  const auto p = bind(g, false);
  return future_graph(g, p, future).value();
}

// ---- checkpoint ------------------------------------------------------------------

void Checkpoint::save(const std::filesystem::path& dir) const {
  io::ensure_writable_dir(dir);
  json j;
  j["format_version"] = "tcpdiff-checkpoint/1";
  j["dtype"] = "float32-le";
  j["config"] = json::parse(config.to_json());
  json groups = json::array();
  std::vector<float> payload;
  payload.reserve(params.count());
  for (std::size_t i = 0; i < params.names.size(); ++i) {
    groups.push_back({{"name", params.names[i]}, {"shape", params.values[i].shape}});
    payload.insert(payload.end(), params.values[i].data.begin(), params.values[i].data.end());
  }
  j["parameters"] = groups;
  j["parameter_count"] = payload.size();
  j["metadata"] = metadata.empty() ? json::object() : json::parse(metadata);
  io::write_f32(dir / "params.bin", payload);
  io::write_text(dir / "checkpoint.json", j.dump(2) + "\n");
}

Checkpoint Checkpoint::load(const std::filesystem::path& dir) {
  json j;
  try {
    j = json::parse(io::read_text(dir / "checkpoint.json"));
  } catch (const json::parse_error& e) {
    throw CorruptionError("unparseable checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  Checkpoint ck;
  try {
    if (j.at("format_version").get<std::string>() != "tcpdiff-checkpoint/1")
      throw CorruptionError("unsupported checkpoint format in " + dir.string());
    ck.config = NetworkConfig::from_json(j.at("config").dump());
    std::size_t total = 0;
    for (const auto& e : j.at("parameters")) total += shape_numel(e.at("shape").get<Shape>());
    const auto count = io::f32_count(dir / "params.bin");
    if (count != total)
      throw CorruptionError("params.bin holds " + std::to_string(count) + " values, manifest lists " +
                            std::to_string(total));
    const auto payload = io::read_f32(dir / "params.bin", 0, total);
    std::size_t off = 0;
    for (const auto& e : j.at("parameters")) {
      Shape shape = e.at("shape").get<Shape>();
      const std::size_t len = shape_numel(shape);
      ck.params.add(e.at("name").get<std::string>(),
                    Tensor(std::move(shape), std::vector<float>(payload.begin() + static_cast<std::ptrdiff_t>(off),
                                                                payload.begin() + static_cast<std::ptrdiff_t>(off + len))));
      off += len;
    }
    ck.metadata = j.value("metadata", json::object()).dump();
  } catch (const json::exception& e) {
    throw CorruptionError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  // Validates names and shapes against the config.
  Network<float> probe(ck.config, ck.params);
  (void)probe;
  return ck;
}

template struct ParamStore<float>;
template struct ParamStore<double>;
template class Network<float>;
template class Network<double>;
template BasicTensor<float> sinusoidal_embedding<float>(std::size_t, std::size_t);
template BasicTensor<double> sinusoidal_embedding<double>(std::size_t, std::size_t);

}  // namespace tcpdiff::nn
