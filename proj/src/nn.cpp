#include "sslkit/nn.hpp"

#include <cmath>
#include <limits>

namespace sslkit {

void Module::collect(const std::string& prefix, bool buffers,
                     std::vector<NamedTensor>& out) const {
  for (const auto& p : buffers ? buffers_ : params_) {
    out.push_back({prefix + p.name, p.tensor});
  }
  for (const auto& [name, child] : children_) {
    child->collect(prefix + name + ".", buffers, out);
  }
}

std::vector<NamedTensor> Module::named_parameters() const {
  std::vector<NamedTensor> out;
  collect("", false, out);
  return out;
}

std::vector<NamedTensor> Module::named_buffers() const {
  std::vector<NamedTensor> out;
  collect("", true, out);
  return out;
}

std::vector<NamedTensor> Module::named_state() const {
  auto out = named_parameters();
  auto bufs = named_buffers();
  out.insert(out.end(), bufs.begin(), bufs.end());
  return out;
}

void Module::collect_modules(const std::string& prefix,
                             std::vector<std::pair<std::string, Module*>>& out) {
  for (auto& [name, child] : children_) {
    const std::string full = prefix.empty() ? name : prefix + "." + name;
    out.emplace_back(full, child.get());
    child->collect_modules(full, out);
  }
}

std::vector<std::pair<std::string, Module*>> Module::named_modules() {
  std::vector<std::pair<std::string, Module*>> out;
  collect_modules("", out);
  return out;
}

std::vector<Tensor> Module::trainable_parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) {
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  }
  return out;
}

std::size_t Module::parameter_count(bool trainable_only) const {
  std::size_t n = 0;
  for (auto& p : named_parameters()) {
    if (!trainable_only || p.tensor.requires_grad()) n += p.tensor.numel();
  }
  return n;
}

void Module::zero_grad() {
  for (auto& p : named_parameters()) p.tensor.zero_grad();
}

void Module::set_training(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->set_training(on);
}

Tensor Module::add_parameter(const std::string& name, NdArray init) {
  Tensor t = Tensor::parameter(std::move(init));
  params_.push_back({name, t});
  return t;
}

Tensor Module::add_buffer(const std::string& name, NdArray init) {
  Tensor t = Tensor::constant(std::move(init));
  buffers_.push_back({name, t});
  return t;
}

void freeze_parameters(Module& m) {
  for (auto& p : m.named_parameters()) p.tensor.set_requires_grad(false);
}

void unfreeze_parameters(Module& m) {
  for (auto& p : m.named_parameters()) p.tensor.set_requires_grad(true);
}

namespace {

NdArray uniform_init(Shape shape, double bound, Rng& rng) {
  NdArray a(std::move(shape));
  for (double& v : a.data) v = rng.uniform(-bound, bound);
  return a;
}

}  // namespace

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& rng,
               bool bias)
    : in_(in_features), out_(out_features) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight_ = add_parameter("weight", uniform_init({out_features, in_features}, bound, rng));
  if (bias) bias_ = add_parameter("bias", uniform_init({out_features}, bound, rng));
}

void Linear::attach_adapter(std::size_t rank, double alpha, double dropout,
                            Rng& init_rng, std::uint64_t dropout_seed) {
  if (adapter_) throw std::logic_error("Linear already carries an adapter");
  NdArray a({rank, in_});
  const double stddev = 1.0 / static_cast<double>(rank);
  for (double& v : a.data) v = init_rng.normal(0.0, stddev);
  Adapter ad{rank, alpha, dropout, add_parameter("lora_A", std::move(a)),
             add_parameter("lora_B", NdArray({out_, rank}, 0.0)), Rng(dropout_seed)};
  adapter_ = std::move(ad);
}

Tensor Linear::forward(const Tensor& x) {
  Tensor y = ops::linear(x, weight_, bias_);
  if (!adapter_) return y;
  Tensor in = x;
  if (training() && adapter_->dropout > 0.0) {
    const double keep = 1.0 - adapter_->dropout;
    std::vector<double> mask(x.numel());
    for (double& m : mask) m = adapter_->dropout_rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    in = ops::mul(x, Tensor::constant(x.shape(), std::move(mask)));
  }
  Tensor low = ops::linear(in, adapter_->a, Tensor());
  Tensor delta = ops::linear(low, adapter_->b, Tensor());
  return ops::add(y, ops::mul_scalar(delta, adapter_->scaling()));
}

LayerNorm::LayerNorm(std::size_t dim) {
  gamma_ = add_parameter("weight", NdArray({dim}, 1.0));
  beta_ = add_parameter("bias", NdArray({dim}, 0.0));
}

Tensor LayerNorm::forward(const Tensor& x) { return ops::layer_norm(x, gamma_, beta_); }

Tensor activate(const Tensor& x, Activation act) {
  return act == Activation::kGelu ? ops::gelu(x) : ops::relu(x);
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, Activation act)
    : act_(act) {
  fc1_ = add_module("fc1", std::make_unique<Linear>(in, hidden, rng));
  fc2_ = add_module("fc2", std::make_unique<Linear>(hidden, out, rng));
}

Tensor Mlp::forward(const Tensor& x) {
  return fc2_->forward(activate(fc1_->forward(x), act_));
}

Embedding::Embedding(std::size_t vocab, std::size_t dim, Rng& rng)
    : vocab_(vocab), dim_(dim) {
  NdArray t({vocab, dim});
  for (double& v : t.data) v = rng.normal(0.0, 0.1);
  table_ = add_parameter("weight", std::move(t));
}

Tensor Embedding::forward(const NdArray& ids) {
  auto idx = std::make_shared<std::vector<std::int64_t>>(ids.numel() * dim_);
  for (std::size_t i = 0; i < ids.numel(); ++i) {
    const auto id = static_cast<std::int64_t>(ids.data[i]);
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_) {
      throw ShapeError("Embedding: token id " + std::to_string(id) + " out of vocabulary");
    }
    for (std::size_t j = 0; j < dim_; ++j)
      (*idx)[i * dim_ + j] = id * static_cast<std::int64_t>(dim_) + static_cast<std::int64_t>(j);
  }
  Shape shape = ids.shape;
  shape.push_back(dim_);
  return ops::gather(table_, idx, std::move(shape));
}

Conv2d::Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
               std::size_t stride, std::size_t padding, Rng& rng)
    : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), padding_(padding) {
  proj_ = add_module("proj", std::make_unique<Linear>(kernel * kernel * in_ch, out_ch, rng));
}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.rank() != 4 || x.dim(3) != in_ch_) {
    throw ShapeError("Conv2d expects [B, H, W, " + std::to_string(in_ch_) + "], got " +
                     shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = (h + 2 * padding_ - kernel_) / stride_ + 1;
  const std::size_t wo = (w + 2 * padding_ - kernel_) / stride_ + 1;
  const std::size_t cols = kernel_ * kernel_ * in_ch_;
  IndexMap idx = cache_.get({b, h, w}, [&] {
    std::vector<std::int64_t> m(b * ho * wo * cols);
    std::size_t pos = 0;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
          for (std::size_t ky = 0; ky < kernel_; ++ky)
            for (std::size_t kx = 0; kx < kernel_; ++kx) {
              const auto iy = static_cast<std::int64_t>(oy * stride_ + ky) -
                              static_cast<std::int64_t>(padding_);
              const auto ix = static_cast<std::int64_t>(ox * stride_ + kx) -
                              static_cast<std::int64_t>(padding_);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::int64_t>(h) &&
                                  ix < static_cast<std::int64_t>(w);
              for (std::size_t c = 0; c < in_ch_; ++c) {
                m[pos++] = inside ? static_cast<std::int64_t>(((n * h + iy) * w + ix) * in_ch_ + c)
                                  : -1;
              }
            }
    return m;
  });
  Tensor patches = ops::gather(x, idx, {b * ho * wo, cols});
  return ops::reshape(proj_->forward(patches), {b, ho, wo, out_ch_});
}

Conv1d::Conv1d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
               std::size_t stride, Rng& rng)
    : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride) {
  proj_ = add_module("proj", std::make_unique<Linear>(kernel * in_ch, out_ch, rng));
}

std::size_t Conv1d::output_length(std::size_t t) const {
  return t < kernel_ ? 0 : (t - kernel_) / stride_ + 1;
}

Tensor Conv1d::forward(const Tensor& x) {
  if (x.rank() != 3 || x.dim(2) != in_ch_) {
    throw ShapeError("Conv1d expects [B, T, " + std::to_string(in_ch_) + "], got " +
                     shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), t = x.dim(1);
  const std::size_t to = output_length(t);
  if (to == 0) throw ShapeError("Conv1d: input shorter than kernel");
  const std::size_t cols = kernel_ * in_ch_;
  IndexMap idx = cache_.get({b, t}, [&] {
    std::vector<std::int64_t> m(b * to * cols);
    std::size_t pos = 0;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t o = 0; o < to; ++o)
        for (std::size_t k = 0; k < kernel_; ++k)
          for (std::size_t c = 0; c < in_ch_; ++c)
            m[pos++] = static_cast<std::int64_t>((n * t + o * stride_ + k) * in_ch_ + c);
    return m;
  });
  Tensor frames = ops::gather(x, idx, {b * to, cols});
  return ops::reshape(proj_->forward(frames), {b, to, out_ch_});
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng)
    : dim_(dim), heads_(heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("attention width " + std::to_string(dim) +
                     " is not divisible by heads " + std::to_string(heads));
  }
  query_ = add_module("query", std::make_unique<Linear>(dim, dim, rng));
  key_ = add_module("key", std::make_unique<Linear>(dim, dim, rng));
  value_ = add_module("value", std::make_unique<Linear>(dim, dim, rng));
  out_ = add_module("out", std::make_unique<Linear>(dim, dim, rng));
}

Tensor MultiHeadAttention::forward(const Tensor& x, const NdArray* key_mask) {
  if (x.rank() != 3 || x.dim(2) != dim_) {
    throw ShapeError("attention expects [B, T, " + std::to_string(dim_) + "], got " +
                     shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), t = x.dim(1), h = heads_, dh = dim_ / heads_;
  // [B, T, H*dh] -> [B*H, T, dh]
  IndexMap split = split_cache_.get({b, t}, [&] {
    std::vector<std::int64_t> m(b * t * dim_);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t hh = 0; hh < h; ++hh)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j)
            m[((n * h + hh) * t + i) * dh + j] =
                static_cast<std::int64_t>((n * t + i) * dim_ + hh * dh + j);
    return m;
  });
  IndexMap merge = merge_cache_.get({b, t}, [&] {
    std::vector<std::int64_t> m(b * t * dim_);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t hh = 0; hh < h; ++hh)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j)
            m[(n * t + i) * dim_ + hh * dh + j] =
                static_cast<std::int64_t>(((n * h + hh) * t + i) * dh + j);
    return m;
  });
  Tensor q = ops::gather(query_->forward(x), split, {b * h, t, dh});
  Tensor k = ops::gather(key_->forward(x), split, {b * h, t, dh});
  Tensor v = ops::gather(value_->forward(x), split, {b * h, t, dh});
  Tensor scores = ops::mul_scalar(ops::bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (key_mask != nullptr) {
    std::vector<double> bias(b * h * t * t, 0.0);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t kk = 0; kk < t; ++kk) {
        if (key_mask->data[n * t + kk] > 0.5) continue;
        for (std::size_t hh = 0; hh < h; ++hh)
          for (std::size_t i = 0; i < t; ++i)
            bias[((n * h + hh) * t + i) * t + kk] = -std::numeric_limits<double>::infinity();
      }
    scores = ops::add(scores, Tensor::constant({b * h, t, t}, std::move(bias)));
  }
  Tensor ctx = ops::bmm(ops::softmax_rows(scores), v);
  return out_->forward(ops::gather(ctx, merge, {b, t, dim_}));
}

TransformerBlock::TransformerBlock(std::size_t dim, std::size_t heads,
                                   std::size_t mlp_hidden, Rng& rng) {
  norm1_ = add_module("norm1", std::make_unique<LayerNorm>(dim));
  attn_ = add_module("attn", std::make_unique<MultiHeadAttention>(dim, heads, rng));
  norm2_ = add_module("norm2", std::make_unique<LayerNorm>(dim));
  mlp_ = add_module("mlp", std::make_unique<Mlp>(dim, mlp_hidden, dim, rng, Activation::kGelu));
}

Tensor TransformerBlock::forward(const Tensor& x, const NdArray* key_mask) {
  Tensor h = ops::add(x, attn_->forward(norm1_->forward(x), key_mask));
  return ops::add(h, mlp_->forward(norm2_->forward(h)));
}

TransformerStack::TransformerStack(std::size_t dim, std::size_t depth,
                                   std::size_t heads, std::size_t mlp_hidden, Rng& rng) {
  for (std::size_t i = 0; i < depth; ++i) {
    blocks_.push_back(add_module(std::to_string(i),
                                 std::make_unique<TransformerBlock>(dim, heads, mlp_hidden, rng)));
  }
}

Tensor TransformerStack::forward(const Tensor& x, const NdArray* key_mask) {
  Tensor h = x;
  for (auto* blk : blocks_) h = blk->forward(h, key_mask);
  return h;
}

Tensor masked_mean_pool(const Tensor& x, const NdArray* mask) {
  if (x.rank() != 3) throw ShapeError("masked_mean_pool expects [B, T, D]");
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<std::int64_t> src, dst;
  std::vector<double> w;
  for (std::size_t n = 0; n < b; ++n) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < t; ++i)
      if (mask == nullptr || mask->data[n * t + i] > 0.5) ++count;
    if (count == 0) throw ShapeError("masked_mean_pool: a row has no valid positions");
    for (std::size_t i = 0; i < t; ++i) {
      if (mask != nullptr && mask->data[n * t + i] <= 0.5) continue;
      src.push_back(static_cast<std::int64_t>(n * t + i));
      dst.push_back(static_cast<std::int64_t>(n));
      w.push_back(1.0 / static_cast<double>(count));
    }
  }
  return ops::scatter_add_rows(ops::reshape(x, {b * t, d}), src, dst, w, b);
}

}  // namespace sslkit
