#pragma once

// Shipped self-supervised methods behind one MethodInstance interface.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sslkit/backbones.hpp"
#include "sslkit/config.hpp"
#include "sslkit/data.hpp"
#include "sslkit/losses.hpp"

namespace sslkit {

struct BuildContext {
  DataShape data;
  /// Called (possibly more than once, e.g. for momentum copies) when the
  /// config selects backbone "user". Each call must return a fresh module
  /// with the same parameter names.
  std::function<std::unique_ptr<Encoder>()> user_encoder;
};

class MethodInstance : public Module {
 public:
  virtual std::string key() const = 0;
  virtual Modality modality() const = 0;
  /// True when the loss couples samples of a batch (in-batch negatives,
  /// batch statistics). Sharded training gathers features() across shards
  /// for these methods and evaluates loss_from() once.
  virtual bool batch_coupled() const = 0;
  const AugmentationPolicy& policy() const { return policy_; }

  /// Per-sample tensors with leading dim B. Coupled methods only.
  virtual std::vector<Tensor> features(const Batch& b);
  virtual LossOutput loss_from(std::span<const Tensor> feats);
  virtual LossOutput compute_loss(const Batch& b);
  /// Momentum updates, queue writes and clamps after an optimizer step.
  virtual void post_step() {}

  /// Backbone embeddings of view 0 (pair member a for cross-modal), no grad.
  NdArray embed(const Batch& b);
  virtual Encoder& encoder() = 0;
  /// Second tower of cross-modal methods; null otherwise.
  virtual Encoder* pair_encoder() { return nullptr; }
  /// Embeddings of pair member b through the second tower.
  NdArray embed_pair(const Batch& b);

 protected:
  AugmentationPolicy policy_;
};

/// Registers the nine shipped methods.
void register_builtin_methods(Registry& r);

/// Builds the method named by cfg.method with its encoders and heads.
std::unique_ptr<MethodInstance> build_method(const RunConfig& cfg, const BuildContext& ctx,
                                             const Registry& registry = Registry::global());

/// Copies parameter and buffer values between modules with identical state
/// names and shapes.
void copy_state(Module& dst, const Module& src);

/// Method params shared by every shipped method: backbone knobs and the
/// augmentation policy knobs of the modality.
ConfigSchema common_method_schema(Modality m, std::vector<std::string> archs);

/// Augmentation policy described by validated method params.
AugmentationPolicy policy_from_params(Modality m, const RunConfig& cfg, const DataShape& data,
                                      std::size_t n_views);

/// Encoder described by validated method params (or the user factory).
std::unique_ptr<Encoder> make_encoder(const RunConfig& cfg, const BuildContext& ctx, Rng& rng);

}  // namespace sslkit
