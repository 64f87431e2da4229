#pragma once

// Default encoders per modality and the wrapper for user-supplied modules.

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>

#include "sslkit/config.hpp"
#include "sslkit/data.hpp"
#include "sslkit/nn.hpp"

namespace sslkit {

struct UnsupportedModality : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class ShapeProbeFailure : public std::runtime_error {
 public:
  ShapeProbeFailure(std::size_t observed_rank, std::size_t expected_rank, std::string detail);
  std::size_t observed_rank() const { return observed_; }
  std::size_t expected_rank() const { return expected_; }

 private:
  std::size_t observed_;
  std::size_t expected_;
};

/// What an encoder consumes. Exactly one of dense or graph is set.
struct EncoderInput {
  const Tensor* dense = nullptr;    // images [B,H,W,C], waveforms [B,T], tokens [B,L]
  const NdArray* mask = nullptr;    // [B,T] for waveforms and tokens
  const GraphBatch* graph = nullptr;
  std::size_t batch_size() const;
};

struct EncoderSpec {
  Modality modality = Modality::kVision;
  /// tiny_vit | small_resnet | conv1d_audio | transformer_audio | gin | gcn |
  /// text_transformer
  std::string arch;
  std::size_t embed_dim = 128;
  std::size_t width = 128;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t patch_size = 4;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t in_features = 0;  // graph node features
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;     // text positions
  std::size_t frame_kernel = 16;
  std::size_t frame_stride = 8;

  void check() const;
  json to_json() const;
};

class Encoder : public Module {
 public:
  /// [B, embed_dim]
  virtual Tensor forward(const EncoderInput& in) = 0;
  virtual std::size_t embed_dim() const = 0;
  virtual Modality modality() const = 0;
  virtual std::string arch() const = 0;
};

/// Patch-token ViT. Exposes token-level entry points for masked modelling.
class TinyVit : public Encoder {
 public:
  TinyVit(const EncoderSpec& spec, Rng& rng);
  Tensor forward(const EncoderInput& in) override;
  std::size_t embed_dim() const override { return embed_dim_; }
  Modality modality() const override { return Modality::kVision; }
  std::string arch() const override { return "tiny_vit"; }

  std::size_t num_patches() const { return grid_ * grid_; }
  std::size_t patch_dim() const { return patch_ * patch_ * channels_; }
  std::size_t width() const { return width_; }
  /// images [B,H,W,C] -> raw patches [B,P,patch_dim] (row-major patch order).
  Tensor patchify(const Tensor& images);
  /// patches [B,n,patch_dim] at positions `pos` (length n, shared across the
  /// batch, or B*n per-sample) -> tokens [B,n,width] with position embedding.
  Tensor embed_patches(const Tensor& patches, std::span<const std::int64_t> pos);
  /// Transformer stack plus final norm over [B,n,width].
  Tensor encode_tokens(const Tensor& tokens);
  Tensor& pos_embedding() { return pos_; }

 private:
  std::size_t embed_dim_, width_, patch_, grid_, channels_;
  Linear* patch_proj_;
  Tensor pos_;
  TransformerStack* blocks_;
  LayerNorm* norm_;
  Linear* head_;  // null when width == embed_dim
  IndexCache patch_cache_;
};

/// Channels-last residual CNN without normalisation layers.
class SmallResNet : public Encoder {
 public:
  SmallResNet(const EncoderSpec& spec, Rng& rng);
  Tensor forward(const EncoderInput& in) override;
  std::size_t embed_dim() const override { return embed_dim_; }
  Modality modality() const override { return Modality::kVision; }
  std::string arch() const override { return "small_resnet"; }

 private:
  struct Block {
    Conv2d* conv1;
    Conv2d* conv2;
    Conv2d* skip;  // null for identity
  };
  std::size_t embed_dim_;
  Conv2d* stem_;
  std::vector<Block> blocks_;
  Linear* head_;
};

/// Strided 1-D convolutions over raw audio followed by a frame-level context
/// network (pointwise for conv1d_audio, a transformer for transformer_audio).
class AudioEncoder : public Encoder {
 public:
  AudioEncoder(const EncoderSpec& spec, Rng& rng);
  Tensor forward(const EncoderInput& in) override;
  std::size_t embed_dim() const override { return embed_dim_; }
  Modality modality() const override { return Modality::kAudio; }
  std::string arch() const override { return arch_; }

  struct Frames {
    Tensor features;    // [B,T',width]
    NdArray mask;       // [B,T']
  };
  Frames featurize(const Tensor& wave, const NdArray* mask);
  /// [B,T',width] -> [B,T',embed_dim]
  Tensor contextualize(const Tensor& frames, const NdArray& frame_mask);
  std::size_t frame_width() const { return width_; }
  std::size_t frames_for(std::size_t samples) const;

 private:
  std::string arch_;
  std::size_t embed_dim_, width_;
  Conv1d* conv1_;
  Conv1d* conv2_;
  Linear* proj_;
  TransformerStack* context_;  // transformer_audio only
};

/// Message-passing graph encoder. GIN uses sum aggregation and a
/// sum-then-MLP readout; GCN uses symmetric normalisation and mean pooling.
class GraphEncoder : public Encoder {
 public:
  GraphEncoder(const EncoderSpec& spec, Rng& rng);
  Tensor forward(const EncoderInput& in) override;
  std::size_t embed_dim() const override { return embed_dim_; }
  Modality modality() const override { return Modality::kGraph; }
  std::string arch() const override { return arch_; }

 private:
  std::string arch_;
  std::size_t embed_dim_;
  std::vector<Mlp*> gin_layers_;
  std::vector<Linear*> gcn_layers_;
  Mlp* readout_;
  Linear* head_;
};

class TextEncoder : public Encoder {
 public:
  TextEncoder(const EncoderSpec& spec, Rng& rng);
  Tensor forward(const EncoderInput& in) override;
  std::size_t embed_dim() const override { return embed_dim_; }
  Modality modality() const override { return Modality::kCrossmodal; }
  std::string arch() const override { return "text_transformer"; }

 private:
  std::size_t embed_dim_, width_, max_len_;
  Embedding* tokens_;
  Tensor pos_;
  TransformerStack* blocks_;
  LayerNorm* norm_;
  Linear* head_;
};

/// Desk-scale default spec for a modality. Input geometry comes from `data`
/// when given.
EncoderSpec default_spec(Modality m, std::size_t embed_dim, const DataShape* data = nullptr);
std::unique_ptr<Encoder> build_encoder(const EncoderSpec& spec, Rng& rng);
std::unique_ptr<Encoder> build_default(Modality m, std::size_t embed_dim, Rng& rng,
                                       const DataShape* data = nullptr);

using UserForward = std::function<Tensor(Module&, const EncoderInput&)>;

/// Wraps a user module behind the Encoder contract after a shape probe that
/// requires a [B, D] output.
std::unique_ptr<Encoder> adopt_user_encoder(std::unique_ptr<Module> module, UserForward forward,
                                            Modality modality, const EncoderInput& probe);

/// Excludes every encoder parameter from optimisation. Idempotent.
void freeze(Encoder& enc);

/// Encoder input for view `v` of a batch (pair member `a` or `b` for cross-modal).
EncoderInput view_input(const Batch& b, std::size_t v, Tensor& holder);
EncoderInput pair_input(const Batch& b, bool second, Tensor& holder);

}  // namespace sslkit
