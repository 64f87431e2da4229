#pragma once

// Self-supervised objectives on embedding tensors. Every function returns a
// differentiable scalar in LossOutput::loss plus plain-number summaries.

#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sslkit/rng.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit {

struct LossOutput {
  double total = 0.0;
  std::map<std::string, double> parts;
  std::map<std::string, double> diagnostics;
  Tensor loss;
  /// Number of averaging units (samples, masked patches, masked frames) the
  /// loss is a mean over; shard losses are combined with these weights.
  double weight = 1.0;
};

struct DegenerateBatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct EmptyQueue : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NoMaskedFrames : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NT-Xent over 2B anchors with in-batch negatives.
LossOutput nt_xent(const Tensor& za, const Tensor& zb, double temperature);
/// Same objective under its graph name.
LossOutput graphcl_loss(const Tensor& ga, const Tensor& gb, double temperature);

/// mean(2 - 2 cos(pred, stop(target))).
LossOutput byol_loss(const Tensor& online_pred, const Tensor& target_proj);
/// 0.5 * (byol(p1, t2) + byol(p2, t1)).
LossOutput byol_symmetric(const Tensor& p1, const Tensor& p2, const Tensor& t1, const Tensor& t2);
/// target <- m * target + (1 - m) * online, elementwise, outside the graph.
void ema_update(std::span<Tensor> target, std::span<const Tensor> online, double m);

/// Column-standardised cross-correlation objective. Parts: on_diag, off_diag
/// (unweighted); total = on_diag + lambda * off_diag.
LossOutput barlow_twins(const Tensor& za, const Tensor& zb, double lambda, double eps = 1e-5);

/// 0.5 * (-cos(p1, stop(z2)) - cos(p2, stop(z1))), batch mean.
LossOutput simsiam_loss(const Tensor& p1, const Tensor& p2, const Tensor& z1, const Tensor& z2);

/// Fixed-capacity FIFO of unit-norm key embeddings stored as a ring buffer in
/// two tensors, so it can live among a module's buffers.
class NegativeQueue {
 public:
  NegativeQueue(std::size_t capacity, std::size_t dim);
  /// View over existing storage: rows [K, D] and meta [2] = {size, cursor}.
  NegativeQueue(Tensor rows, Tensor meta);

  std::size_t capacity() const { return rows_.dim(0); }
  std::size_t dim() const { return rows_.dim(1); }
  std::size_t size() const;
  /// Appends L2-normalised copies of keys [n, D], evicting the oldest rows.
  void enqueue(const NdArray& keys);
  /// Stored rows, oldest first.
  NdArray snapshot() const;
  /// Stored rows as a constant tensor [size, D].
  Tensor negatives() const;

  Tensor& rows_tensor() { return rows_; }
  Tensor& meta_tensor() { return meta_; }

 private:
  Tensor rows_;
  Tensor meta_;
};

/// InfoNCE with k_pos (gradient-stopped) as the positive and the queue as
/// negatives.
LossOutput moco_loss(const Tensor& q, const Tensor& k_pos, const NegativeQueue& queue,
                     double temperature);

/// logits = a_hat b_hat^T * scale, with scale = 1 / temperature.
LossOutput clip_symmetric_loss(const Tensor& emb_a, const Tensor& emb_b, double temperature);
/// Variant with a learnable log-scale (one-element tensor).
LossOutput clip_symmetric_loss(const Tensor& emb_a, const Tensor& emb_b, const Tensor& log_scale);

/// Mean squared error over the masked rows. pred and target are [B, P, K];
/// masked[b * P + p] selects patches. The target is treated as a constant.
/// With normalize_target each target patch is standardised first.
LossOutput masked_patch_mse(const Tensor& pred, const NdArray& target,
                            std::span<const std::uint8_t> masked, bool normalize_target);

/// ceil(ratio * n) distinct indices from [0, n), at least one, sorted.
std::vector<std::size_t> sample_patch_mask(std::size_t n, double ratio, Rng& rng);
/// Span masking: span starts are drawn until at least ceil(ratio * length)
/// frames are covered. Returns a 0/1 vector of `length`.
std::vector<std::uint8_t> sample_span_mask(std::size_t length, std::size_t span, double ratio,
                                           Rng& rng);
/// Up to k distinct entries of `pool` excluding `self`, drawn uniformly.
std::vector<std::size_t> sample_distractors(std::span<const std::size_t> pool, std::size_t self,
                                            std::size_t k, Rng& rng);

/// Contrastive prediction of masked-frame targets. context and targets are
/// [B, T, D]; mask [B, T] marks masked frames; pad_mask (optional) marks
/// valid frames. Distractors for a frame come from the other masked, valid
/// frames of the same utterance, drawn with seeds[b].
LossOutput wav2vec2_lite_loss(const Tensor& context, const Tensor& targets, const NdArray& mask,
                              const NdArray* pad_mask, double temperature,
                              std::size_t n_distractors, std::span<const std::uint64_t> seeds);

/// Row-wise cosine similarity of two [B, D] tensors -> [B].
Tensor cosine_rows(const Tensor& a, const Tensor& b);

}  // namespace sslkit
