#pragma once

// The 3D conv encoder, the two projection heads, Adam, and checkpoint IO.
//
// The encoder is a residual conv stack with no batch statistics: every
// sample's encoding depends on that sample alone. Optional group
// normalization (groups of 4) is the only normalization offered.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sinuscl/tensor.hpp"
#include "sinuscl/util.hpp"

namespace sinuscl::nn {

struct EncoderConfig {
  int64_t input_extent = 32;
  std::vector<int64_t> channels = {16, 32, 64, 128};
  std::vector<bool> downsample = {true, true, true, true};  // stride-2 per stage
  bool residual = true;
  bool group_norm = false;  // groups of 4 when enabled
  int64_t feature_dim = 512;

  void validate() const {
    if (channels.empty()) throw std::invalid_argument("encoder needs at least one stage");
    if (downsample.size() != channels.size())
      throw std::invalid_argument("downsample flags must match channel stages");
    if (input_extent < 1 || feature_dim < 1)
      throw std::invalid_argument("encoder extents must be positive");
    int64_t extent = input_extent;
    for (bool down : downsample)
      if (down) extent = (extent + 2 - 3) / 2 + 1;
    if (extent < 1)
      throw std::invalid_argument("encoder downsamples " + std::to_string(input_extent) +
                                  " below one voxel");
    if (group_norm)
      for (int64_t c : channels)
        if (c % 4 != 0)
          throw std::invalid_argument("group_norm needs channels divisible by 4, got " +
                                      std::to_string(c));
  }

  int64_t final_extent() const {
    int64_t extent = input_extent;
    for (bool down : downsample)
      if (down) extent = (extent + 2 - 3) / 2 + 1;
    return extent;
  }
};

template <class S>
struct Param {
  std::string name;
  nd::Tensor<S> value;
};

// Group normalization over [batch, channels, spatial...]; per-sample, so it
// never couples batch entries.
template <class S>
nd::Tensor<S> group_norm(const nd::Tensor<S>& x, const nd::Tensor<S>& gamma,
                         const nd::Tensor<S>& beta, int64_t groups, double eps = 1e-5) {
  int64_t b = x.extent(0), c = x.extent(1);
  int64_t m = x.numel() / (b * groups);
  auto flat = nd::reshape(x, {b, groups, m});
  auto mu = nd::mean_along(flat, 2, true);
  auto centered = nd::sub(flat, mu);
  auto var = nd::mean_along(nd::mul(centered, centered), 2, true);
  auto normalized = nd::div(centered, nd::sqrt(nd::add_scalar(var, static_cast<S>(eps))));
  auto y = nd::reshape(normalized, x.shape());
  nd::Shape affine_shape = {c, 1, 1, 1};
  return nd::add(nd::mul(y, nd::reshape(gamma, affine_shape)),
                 nd::reshape(beta, affine_shape));
}

template <class S>
class Model {
 public:
  Model(EncoderConfig config, uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    int64_t cin = 1;
    for (size_t i = 0; i < cfg_.channels.size(); ++i) {
      Stage st;
      int64_t cout = cfg_.channels[i];
      st.stride = cfg_.downsample[i] ? 2 : 1;
      std::string prefix = "enc.stage" + std::to_string(i) + ".";
      st.conv_a_w = kaiming_conv(rng, prefix + "conv_a.weight", cout, cin, 3);
      st.conv_a_b = zeros_param(prefix + "conv_a.bias", {cout});
      st.conv_b_w = kaiming_conv(rng, prefix + "conv_b.weight", cout, cout, 3);
      st.conv_b_b = zeros_param(prefix + "conv_b.bias", {cout});
      st.has_projection = cfg_.residual && (st.stride != 1 || cin != cout);
      if (st.has_projection) {
        st.skip_w = kaiming_conv(rng, prefix + "skip.weight", cout, cin, 1);
        st.skip_b = zeros_param(prefix + "skip.bias", {cout});
      }
      if (cfg_.group_norm) {
        st.gn_a_gamma = const_param(prefix + "gn_a.gamma", {cout}, S(1));
        st.gn_a_beta = zeros_param(prefix + "gn_a.beta", {cout});
        st.gn_b_gamma = const_param(prefix + "gn_b.gamma", {cout}, S(1));
        st.gn_b_beta = zeros_param(prefix + "gn_b.beta", {cout});
      }
      stages_.push_back(std::move(st));
      cin = cout;
    }
    lift_w_ = kaiming_affine(rng, "enc.lift.weight", cin, cfg_.feature_dim);
    lift_b_ = zeros_param("enc.lift.bias", {cfg_.feature_dim});
    p1_w1_ = kaiming_affine(rng, "proj1.fc1.weight", cfg_.feature_dim, cfg_.feature_dim);
    p1_b1_ = zeros_param("proj1.fc1.bias", {cfg_.feature_dim});
    p1_w2_ = kaiming_affine(rng, "proj1.fc2.weight", cfg_.feature_dim, 128);
    p1_b2_ = zeros_param("proj1.fc2.bias", {128});
    p2_w_ = kaiming_affine(rng, "proj2.weight", cfg_.feature_dim, 2);
    p2_b_ = zeros_param("proj2.bias", {2});
  }

  const EncoderConfig& config() const { return cfg_; }
  static constexpr int64_t embedding_dim = 128;

  // [batch, 1, E, E, E] -> [batch, feature_dim]
  nd::Tensor<S> encode(const nd::Tensor<S>& x) const {
    if (x.ndim() != 5 || x.extent(1) != 1)
      throw std::invalid_argument("encode expects [batch,1,d,h,w], got " +
                                  nd::shape_str(x.shape()));
    for (int axis = 2; axis < 5; ++axis)
      if (x.extent(axis) != cfg_.input_extent)
        throw std::invalid_argument(
            "encode: spatial extent mismatch, expected " + std::to_string(cfg_.input_extent) +
            "^3 but got " + nd::shape_str(x.shape()));
    nd::Tensor<S> h = x;
    for (const Stage& st : stages_) {
      auto a = with_bias(nd::conv3d(h, st.conv_a_w.value, st.stride, 1), st.conv_a_b.value);
      if (cfg_.group_norm) a = group_norm(a, st.gn_a_gamma.value, st.gn_a_beta.value, 4);
      a = nd::relu(a);
      auto b = with_bias(nd::conv3d(a, st.conv_b_w.value, 1, 1), st.conv_b_b.value);
      if (cfg_.group_norm) b = group_norm(b, st.gn_b_gamma.value, st.gn_b_beta.value, 4);
      if (cfg_.residual) {
        auto skip = st.has_projection
                        ? with_bias(nd::conv3d(h, st.skip_w.value, st.stride, 0),
                                    st.skip_b.value)
                        : h;
        b = nd::add(b, skip);
      }
      h = nd::relu(b);
    }
    auto pooled = nd::global_avg_pool(h);
    return nd::add(nd::matmul(pooled, lift_w_.value), lift_b_.value);
  }

  // [batch, feature_dim] -> unit-norm [batch, 128]
  nd::Tensor<S> project_contrastive(const nd::Tensor<S>& features) const {
    auto h = nd::relu(nd::add(nd::matmul(features, p1_w1_.value), p1_b1_.value));
    return nd::l2_normalize(nd::add(nd::matmul(h, p1_w2_.value), p1_b2_.value));
  }

  // [batch, feature_dim] -> raw logits [batch, 2]
  nd::Tensor<S> project_classify(const nd::Tensor<S>& features) const {
    return nd::add(nd::matmul(features, p2_w_.value), p2_b_.value);
  }

  std::vector<Param<S>*> encoder_parameters() {
    std::vector<Param<S>*> ps;
    for (Stage& st : stages_) {
      ps.push_back(&st.conv_a_w);
      ps.push_back(&st.conv_a_b);
      ps.push_back(&st.conv_b_w);
      ps.push_back(&st.conv_b_b);
      if (st.has_projection) {
        ps.push_back(&st.skip_w);
        ps.push_back(&st.skip_b);
      }
      if (cfg_.group_norm) {
        ps.push_back(&st.gn_a_gamma);
        ps.push_back(&st.gn_a_beta);
        ps.push_back(&st.gn_b_gamma);
        ps.push_back(&st.gn_b_beta);
      }
    }
    ps.push_back(&lift_w_);
    ps.push_back(&lift_b_);
    return ps;
  }

  std::vector<Param<S>*> contrastive_head_parameters() {
    return {&p1_w1_, &p1_b1_, &p1_w2_, &p1_b2_};
  }

  std::vector<Param<S>*> classifier_head_parameters() { return {&p2_w_, &p2_b_}; }

  std::vector<Param<S>*> all_parameters() {
    auto ps = encoder_parameters();
    for (auto* p : contrastive_head_parameters()) ps.push_back(p);
    for (auto* p : classifier_head_parameters()) ps.push_back(p);
    return ps;
  }

 private:
  struct Stage {
    Param<S> conv_a_w, conv_a_b, conv_b_w, conv_b_b;
    bool has_projection = false;
    Param<S> skip_w, skip_b;
    Param<S> gn_a_gamma, gn_a_beta, gn_b_gamma, gn_b_beta;
    int64_t stride = 1;
  };

  static nd::Tensor<S> with_bias(const nd::Tensor<S>& conv_out, const nd::Tensor<S>& bias) {
    return nd::add(conv_out, nd::reshape(bias, {bias.numel(), 1, 1, 1}));
  }

  Param<S> kaiming_conv(std::mt19937_64& rng, std::string name, int64_t cout, int64_t cin,
                        int64_t k) {
    return kaiming(rng, std::move(name), {cout, cin, k, k, k}, cin * k * k * k);
  }

  Param<S> kaiming_affine(std::mt19937_64& rng, std::string name, int64_t in, int64_t out) {
    return kaiming(rng, std::move(name), {in, out}, in);
  }

  // Fan-in scaled uniform: bound sqrt(6/fan_in), giving variance 2/fan_in.
  Param<S> kaiming(std::mt19937_64& rng, std::string name, nd::Shape shape, int64_t fan_in) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<S> data(static_cast<size_t>(nd::numel_of(shape)));
    for (S& v : data) v = static_cast<S>(dist(rng));
    return {std::move(name), nd::Tensor<S>::from_data(std::move(shape), std::move(data), true)};
  }

  Param<S> zeros_param(std::string name, nd::Shape shape) {
    return {std::move(name), nd::Tensor<S>::zeros(std::move(shape), true)};
  }

  Param<S> const_param(std::string name, nd::Shape shape, S v) {
    return {std::move(name), nd::Tensor<S>::full(std::move(shape), v, true)};
  }

  EncoderConfig cfg_;
  std::vector<Stage> stages_;
  Param<S> lift_w_, lift_b_;
  Param<S> p1_w1_, p1_b1_, p1_w2_, p1_b2_;
  Param<S> p2_w_, p2_b_;
};

// ---- Adam ----

template <class S>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// Standard bias-corrected Adam. Parameters without a gradient buffer are
// treated as zero-gradient. Each update produces fresh leaf tensors; tensors
// already captured by a recorded graph are never mutated.
template <class S>
void adam_step(const std::vector<Param<S>*>& params, AdamState<S>& state) {
  state.step_count += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (Param<S>* p : params) {
    size_t n = p->value.data().size();
    auto& [m, v] = state.moments[p->name];
    if (m.empty()) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    } else if (m.size() != n) {
      throw std::invalid_argument("adam state shape mismatch for parameter " + p->name);
    }
    std::span<const S> grad = p->value.grad();
    bool has_grad = !grad.empty();
    if (has_grad)
      for (S g : grad)
        if (std::isnan(static_cast<double>(g)))
          throw std::runtime_error("NaN gradient in parameter " + p->name);
    std::vector<S> next(p->value.data().begin(), p->value.data().end());
    for (size_t i = 0; i < n; ++i) {
      double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      next[i] = static_cast<S>(static_cast<double>(next[i]) -
                               state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
    p->value = nd::Tensor<S>::from_data(p->value.shape(), std::move(next), true);
  }
}

// ---- checkpoint (SCLM) ----
// magic "SCLM", u16 version, u32 entry count, then per entry:
// u32 name length + UTF-8 name, u32 rank, u32 extents, f32 little-endian data.

namespace detail {

inline void put_u16(std::ostream& os, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace detail

struct CheckpointEntry {
  nd::Shape shape;
  std::vector<float> data;
};

template <class S>
void save_checkpoint(const std::string& path, const std::vector<Param<S>*>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write("SCLM", 4);
  detail::put_u16(os, 1);
  detail::put_u32(os, static_cast<uint32_t>(params.size()));
  for (const Param<S>* p : params) {
    detail::put_u32(os, static_cast<uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::put_u32(os, static_cast<uint32_t>(p->value.shape().size()));
    for (int64_t e : p->value.shape()) detail::put_u32(os, static_cast<uint32_t>(e));
    for (S v : p->value.data()) {
      float f = static_cast<float>(v);
      os.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

inline std::map<std::string, CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SCLM", 4) != 0)
    throw std::runtime_error("bad checkpoint magic in " + path);
  uint16_t version = detail::get_u16(is);
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  uint32_t count = detail::get_u32(is);
  std::map<std::string, CheckpointEntry> entries;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = detail::get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = detail::get_u32(is);
    CheckpointEntry entry;
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      entry.shape.push_back(static_cast<int64_t>(detail::get_u32(is)));
      numel *= entry.shape.back();
    }
    entry.data.resize(static_cast<size_t>(numel));
    is.read(reinterpret_cast<char*>(entry.data.data()),
            static_cast<std::streamsize>(numel * 4));
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    entries.emplace(std::move(name), std::move(entry));
  }
  return entries;
}

template <class S>
void load_into_model(Model<S>& model, const std::string& path) {
  auto entries = load_checkpoint(path);
  auto params = model.all_parameters();
  if (entries.size() != params.size())
    throw std::runtime_error("checkpoint has " + std::to_string(entries.size()) +
                             " entries but model has " + std::to_string(params.size()));
  for (Param<S>* p : params) {
    auto it = entries.find(p->name);
    if (it == entries.end())
      throw std::runtime_error("checkpoint is missing parameter " + p->name);
    if (it->second.shape != p->value.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + p->name + ": " +
                               nd::shape_str(it->second.shape) + " vs " +
                               nd::shape_str(p->value.shape()));
    std::vector<S> data(it->second.data.begin(), it->second.data.end());
    p->value = nd::Tensor<S>::from_data(p->value.shape(), std::move(data), true);
  }
}

using Modelf = Model<float>;

}  // namespace sinuscl::nn
