#pragma once

// Parameterised building blocks shared by encoders, heads and user models.

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "sslkit/rng.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Tree of named parameters and child modules. Children are owned by their
/// parent; subclasses keep typed raw pointers returned by add_module().
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  /// Parameters (trainable or frozen), depth-first, dotted names.
  std::vector<NamedTensor> named_parameters() const;
  /// Non-parameter state such as queues and counters.
  std::vector<NamedTensor> named_buffers() const;
  /// Parameters followed by buffers; this is what checkpoints store.
  std::vector<NamedTensor> named_state() const;
  std::vector<std::pair<std::string, Module*>> named_modules();

  std::vector<Tensor> trainable_parameters() const;
  std::size_t parameter_count(bool trainable_only = false) const;
  void zero_grad();

  void set_training(bool on);
  bool training() const { return training_; }

 protected:
  Tensor add_parameter(const std::string& name, NdArray init);
  Tensor add_buffer(const std::string& name, NdArray init);

  template <class M>
  M* add_module(const std::string& name, std::unique_ptr<M> m) {
    M* raw = m.get();
    children_.emplace_back(name, std::move(m));
    return raw;
  }

 private:
  void collect(const std::string& prefix, bool buffers,
               std::vector<NamedTensor>& out) const;
  void collect_modules(const std::string& prefix,
                       std::vector<std::pair<std::string, Module*>>& out);

  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
  bool training_ = true;
};

/// Sets requires_grad=false on every parameter of `m`.
void freeze_parameters(Module& m);
void unfreeze_parameters(Module& m);

/// Thread-safe memo of index maps keyed by input geometry.
class IndexCache {
 public:
  template <class Build>
  IndexMap get(const std::vector<std::size_t>& key, Build build) {
    std::lock_guard lock(mu_);
    auto it = maps_.find(key);
    if (it != maps_.end()) return it->second;
    IndexMap m = std::make_shared<const std::vector<std::int64_t>>(build());
    maps_.emplace(key, m);
    return m;
  }

 private:
  std::mutex mu_;
  std::map<std::vector<std::size_t>, IndexMap> maps_;
};

/// y = x W^T + b, optionally with a low-rank adapter on the side:
/// y += (alpha / r) * B (A dropout(x)).
class Linear : public Module {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng,
         bool bias = true);

  Tensor forward(const Tensor& x);

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  struct Adapter {
    std::size_t rank;
    double alpha;
    double dropout;
    Tensor a;  // [r, in]
    Tensor b;  // [out, r]
    Rng dropout_rng;
    double scaling() const { return alpha / static_cast<double>(rank); }
  };
  /// A ~ N(0, 1/r^2), B = 0.
  void attach_adapter(std::size_t rank, double alpha, double dropout, Rng& init_rng,
                      std::uint64_t dropout_seed);
  const std::optional<Adapter>& adapter() const { return adapter_; }

 private:
  std::size_t in_;
  std::size_t out_;
  Tensor weight_;
  Tensor bias_;
  std::optional<Adapter> adapter_;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(std::size_t dim);
  Tensor forward(const Tensor& x);

 private:
  Tensor gamma_;
  Tensor beta_;
};

enum class Activation { kRelu, kGelu };
Tensor activate(const Tensor& x, Activation act);

/// Linear -> activation -> Linear.
class Mlp : public Module {
 public:
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
      Activation act = Activation::kRelu);
  Tensor forward(const Tensor& x);

 private:
  Linear* fc1_;
  Linear* fc2_;
  Activation act_;
};

class Embedding : public Module {
 public:
  Embedding(std::size_t vocab, std::size_t dim, Rng& rng);
  /// ids [B, L] (integral values stored as doubles) -> [B, L, dim]
  Tensor forward(const NdArray& ids);

 private:
  std::size_t vocab_;
  std::size_t dim_;
  Tensor table_;
};

/// 2-D convolution on channels-last input [B, H, W, C] -> [B, Ho, Wo, Cout].
class Conv2d : public Module {
 public:
  Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
         std::size_t stride, std::size_t padding, Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  std::size_t in_ch_, out_ch_, kernel_, stride_, padding_;
  Linear* proj_;
  IndexCache cache_;
};

/// 1-D valid convolution on [B, T, C] -> [B, To, Cout].
class Conv1d : public Module {
 public:
  Conv1d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
         std::size_t stride, Rng& rng);
  Tensor forward(const Tensor& x);
  std::size_t output_length(std::size_t t) const;
  std::size_t kernel() const { return kernel_; }
  std::size_t stride() const { return stride_; }

 private:
  std::size_t in_ch_, out_ch_, kernel_, stride_;
  Linear* proj_;
  IndexCache cache_;
};

/// Multi-head self-attention with child linears named query/key/value/out.
class MultiHeadAttention : public Module {
 public:
  MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng);
  /// x [B, T, D]; key_mask optional [B, T] with 1 for attendable positions.
  Tensor forward(const Tensor& x, const NdArray* key_mask);

 private:
  std::size_t dim_, heads_;
  Linear* query_;
  Linear* key_;
  Linear* value_;
  Linear* out_;
  IndexCache split_cache_;
  IndexCache merge_cache_;
};

/// Pre-norm transformer block.
class TransformerBlock : public Module {
 public:
  TransformerBlock(std::size_t dim, std::size_t heads, std::size_t mlp_hidden,
                   Rng& rng);
  Tensor forward(const Tensor& x, const NdArray* key_mask);

 private:
  LayerNorm* norm1_;
  MultiHeadAttention* attn_;
  LayerNorm* norm2_;
  Mlp* mlp_;
};

class TransformerStack : public Module {
 public:
  TransformerStack(std::size_t dim, std::size_t depth, std::size_t heads,
                   std::size_t mlp_hidden, Rng& rng);
  Tensor forward(const Tensor& x, const NdArray* key_mask);
  std::size_t depth() const { return blocks_.size(); }

 private:
  std::vector<TransformerBlock*> blocks_;
};

/// Masked mean over the time axis: x [B, T, D], mask [B, T] -> [B, D].
/// A null mask averages every position.
Tensor masked_mean_pool(const Tensor& x, const NdArray* mask);

}  // namespace sslkit
