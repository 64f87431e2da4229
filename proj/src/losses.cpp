#include "sslkit/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace sslkit {

namespace {

constexpr double kEps = 1e-8;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void require_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": inputs must be matching [B, D], got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

LossOutput finish(Tensor loss, double weight) {
  LossOutput out;
  out.total = loss.item();
  out.loss = std::move(loss);
  out.weight = weight;
  return out;
}

double mean_of(const Tensor& t) {
  const auto v = t.values();
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<std::int64_t> iota64(std::size_t n, std::int64_t start = 0) {
  std::vector<std::int64_t> v(n);
  std::iota(v.begin(), v.end(), start);
  return v;
}

}  // namespace

Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  return ops::sum_cols(ops::mul(ops::l2_normalize_rows(a, kEps), ops::l2_normalize_rows(b, kEps)));
}

LossOutput nt_xent(const Tensor& za, const Tensor& zb, double temperature) {
  require_pair(za, zb, "nt_xent");
  const std::size_t B = za.dim(0);
  if (B < 2) throw DegenerateBatch("nt_xent needs at least 2 pairs, got " + std::to_string(B));
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
  const Tensor parts[] = {ops::l2_normalize_rows(za, kEps), ops::l2_normalize_rows(zb, kEps)};
  Tensor z = ops::concat_rows(parts);
  Tensor sim = ops::mul_scalar(ops::matmul_nt(z, z), 1.0 / temperature);
  const std::size_t n = 2 * B;
  std::vector<double> self_mask(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) self_mask[i * n + i] = kNegInf;
  Tensor logits = ops::add(sim, Tensor::constant({n, n}, std::move(self_mask)));
  std::vector<std::int64_t> targets(n);
  for (std::size_t i = 0; i < B; ++i) {
    targets[i] = static_cast<std::int64_t>(i + B);
    targets[i + B] = static_cast<std::int64_t>(i);
  }
  LossOutput out = finish(ops::cross_entropy(logits, targets), static_cast<double>(B));
  out.parts["contrastive"] = out.total;
  {
    NoGradGuard ng;
    out.diagnostics["pos_similarity"] = mean_of(cosine_rows(za, zb));
  }
  return out;
}

LossOutput graphcl_loss(const Tensor& ga, const Tensor& gb, double temperature) {
  return nt_xent(ga, gb, temperature);
}

LossOutput byol_loss(const Tensor& online_pred, const Tensor& target_proj) {
  require_pair(online_pred, target_proj, "byol_loss");
  Tensor cos = cosine_rows(online_pred, target_proj.detach());
  Tensor loss = ops::mean(ops::add_scalar(ops::mul_scalar(cos, -2.0), 2.0));
  LossOutput out = finish(loss, static_cast<double>(online_pred.dim(0)));
  out.parts["regression"] = out.total;
  out.diagnostics["cosine"] = mean_of(cos);
  return out;
}

LossOutput byol_symmetric(const Tensor& p1, const Tensor& p2, const Tensor& t1, const Tensor& t2) {
  LossOutput a = byol_loss(p1, t2);
  LossOutput b = byol_loss(p2, t1);
  Tensor loss = ops::mul_scalar(ops::add(a.loss, b.loss), 0.5);
  LossOutput out = finish(loss, a.weight);
  out.parts["view_12"] = a.total;
  out.parts["view_21"] = b.total;
  out.diagnostics["cosine"] = 0.5 * (a.diagnostics["cosine"] + b.diagnostics["cosine"]);
  return out;
}

void ema_update(std::span<Tensor> target, std::span<const Tensor> online, double m) {
  if (target.size() != online.size()) throw std::invalid_argument("ema_update: parameter lists differ");
  if (!(m >= 0.0 && m < 1.0)) throw std::invalid_argument("ema_update: momentum must lie in [0, 1)");
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto t = target[i].mutable_values();
    const auto o = online[i].values();
    if (t.size() != o.size()) throw ShapeError("ema_update: parameter shapes differ");
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = m * t[j] + (1.0 - m) * o[j];
  }
}

LossOutput barlow_twins(const Tensor& za, const Tensor& zb, double lambda, double eps) {
  require_pair(za, zb, "barlow_twins");
  const std::size_t B = za.dim(0), D = za.dim(1);
  if (B < 2) throw DegenerateBatch("barlow_twins needs at least 2 samples");
  auto standardize = [eps](const Tensor& z) {
    Tensor centered = ops::sub(z, ops::mean_rows(z));
    Tensor var = ops::mean_rows(ops::square(centered));
    return ops::div(centered, ops::sqrt(ops::add_scalar(var, eps)));
  };
  Tensor c = ops::mul_scalar(ops::matmul(ops::transpose(standardize(za)), standardize(zb)),
                             1.0 / static_cast<double>(B));
  std::vector<double> eye(D * D, 0.0), off(D * D, 1.0);
  for (std::size_t i = 0; i < D; ++i) {
    eye[i * D + i] = 1.0;
    off[i * D + i] = 0.0;
  }
  Tensor I = Tensor::constant({D, D}, eye);
  Tensor on_diag = ops::sum(ops::square(ops::mul(ops::sub(c, I), I)));
  Tensor off_diag = ops::sum(ops::square(ops::mul(c, Tensor::constant({D, D}, off))));
  Tensor loss = ops::add(on_diag, ops::mul_scalar(off_diag, lambda));
  LossOutput out = finish(loss, static_cast<double>(B));
  out.parts["on_diag"] = on_diag.item();
  out.parts["off_diag"] = off_diag.item();
  return out;
}

LossOutput simsiam_loss(const Tensor& p1, const Tensor& p2, const Tensor& z1, const Tensor& z2) {
  require_pair(p1, z2, "simsiam_loss");
  require_pair(p2, z1, "simsiam_loss");
  Tensor c12 = ops::mean(cosine_rows(p1, z2.detach()));
  Tensor c21 = ops::mean(cosine_rows(p2, z1.detach()));
  Tensor loss = ops::mul_scalar(ops::add(c12, c21), -0.5);
  LossOutput out = finish(loss, static_cast<double>(p1.dim(0)));
  out.parts["neg_cos_12"] = -c12.item();
  out.parts["neg_cos_21"] = -c21.item();
  return out;
}

// ---------------------------------------------------------------------------

NegativeQueue::NegativeQueue(std::size_t capacity, std::size_t dim)
    : NegativeQueue(Tensor::constant(NdArray({capacity, dim}, 0.0)),
                    Tensor::constant(NdArray({2}, 0.0))) {}

NegativeQueue::NegativeQueue(Tensor rows, Tensor meta) : rows_(std::move(rows)), meta_(std::move(meta)) {
  if (rows_.rank() != 2 || rows_.dim(0) == 0) throw ShapeError("queue storage must be [K, D], K > 0");
  if (meta_.numel() != 2) throw ShapeError("queue meta must hold {size, cursor}");
}

std::size_t NegativeQueue::size() const { return static_cast<std::size_t>(meta_.at(0)); }

void NegativeQueue::enqueue(const NdArray& keys) {
  if (keys.rank() != 2 || keys.dim(1) != dim()) throw ShapeError("enqueue: keys must be [n, D]");
  auto rows = rows_.mutable_values();
  auto meta = meta_.mutable_values();
  auto size = static_cast<std::size_t>(meta[0]);
  auto cursor = static_cast<std::size_t>(meta[1]);
  const std::size_t K = capacity(), D = dim();
  for (std::size_t i = 0; i < keys.dim(0); ++i) {
    double norm = 0;
    for (std::size_t j = 0; j < D; ++j) norm += keys.data[i * D + j] * keys.data[i * D + j];
    norm = std::max(std::sqrt(norm), kEps);
    for (std::size_t j = 0; j < D; ++j) rows[cursor * D + j] = keys.data[i * D + j] / norm;
    cursor = (cursor + 1) % K;
    size = std::min(size + 1, K);
  }
  meta[0] = static_cast<double>(size);
  meta[1] = static_cast<double>(cursor);
}

NdArray NegativeQueue::snapshot() const {
  const std::size_t n = size(), K = capacity(), D = dim();
  const auto cursor = static_cast<std::size_t>(meta_.at(1));
  const std::size_t oldest = n < K ? 0 : cursor;
  NdArray out({n, D});
  const auto rows = rows_.values();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = (oldest + i) % K;
    std::copy_n(rows.begin() + static_cast<std::ptrdiff_t>(r * D), D,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * D));
  }
  return out;
}

Tensor NegativeQueue::negatives() const {
  const std::size_t n = size(), D = dim();
  const auto rows = rows_.values();
  // Ring order is irrelevant to the softmax; storage order avoids a copy pass.
  return Tensor::constant({n, D}, std::vector<double>(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n * D)));
}

LossOutput moco_loss(const Tensor& q, const Tensor& k_pos, const NegativeQueue& queue,
                     double temperature) {
  require_pair(q, k_pos, "moco_loss");
  if (queue.size() == 0) throw EmptyQueue("moco_loss: negative queue is empty");
  if (queue.dim() != q.dim(1)) throw ShapeError("moco_loss: queue width differs from embeddings");
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
  const std::size_t B = q.dim(0);
  Tensor qn = ops::l2_normalize_rows(q, kEps);
  Tensor kn = ops::l2_normalize_rows(k_pos.detach(), kEps);
  Tensor pos = ops::reshape(ops::sum_cols(ops::mul(qn, kn)), {B, 1});
  Tensor neg = ops::matmul_nt(qn, queue.negatives());
  const Tensor cols[] = {pos, neg};
  Tensor logits = ops::mul_scalar(ops::concat_cols(cols), 1.0 / temperature);
  std::vector<std::int64_t> targets(B, 0);
  LossOutput out = finish(ops::cross_entropy(logits, targets), static_cast<double>(B));
  out.parts["contrastive"] = out.total;
  out.diagnostics["pos_similarity"] = mean_of(pos);
  out.diagnostics["neg_similarity"] = mean_of(neg);
  return out;
}

namespace {

LossOutput clip_from_logits(const Tensor& logits, std::size_t B) {
  std::vector<std::int64_t> diag = iota64(B);
  Tensor row = ops::cross_entropy(logits, diag);
  Tensor col = ops::cross_entropy(ops::transpose(logits), diag);
  Tensor loss = ops::mul_scalar(ops::add(row, col), 0.5);
  LossOutput out = finish(loss, static_cast<double>(B));
  out.parts["a_to_b"] = row.item();
  out.parts["b_to_a"] = col.item();
  return out;
}

}  // namespace

LossOutput clip_symmetric_loss(const Tensor& emb_a, const Tensor& emb_b, double temperature) {
  require_pair(emb_a, emb_b, "clip_symmetric_loss");
  if (emb_a.dim(0) < 2) throw DegenerateBatch("clip loss needs at least 2 pairs");
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
  Tensor logits = ops::mul_scalar(
      ops::matmul_nt(ops::l2_normalize_rows(emb_a, kEps), ops::l2_normalize_rows(emb_b, kEps)),
      1.0 / temperature);
  LossOutput out = clip_from_logits(logits, emb_a.dim(0));
  out.diagnostics["temperature"] = temperature;
  return out;
}

LossOutput clip_symmetric_loss(const Tensor& emb_a, const Tensor& emb_b, const Tensor& log_scale) {
  require_pair(emb_a, emb_b, "clip_symmetric_loss");
  if (emb_a.dim(0) < 2) throw DegenerateBatch("clip loss needs at least 2 pairs");
  Tensor sims = ops::matmul_nt(ops::l2_normalize_rows(emb_a, kEps), ops::l2_normalize_rows(emb_b, kEps));
  Tensor logits = ops::scale_by(sims, ops::exp(log_scale));
  LossOutput out = clip_from_logits(logits, emb_a.dim(0));
  out.diagnostics["temperature"] = std::exp(-log_scale.item());
  return out;
}

LossOutput masked_patch_mse(const Tensor& pred, const NdArray& target,
                            std::span<const std::uint8_t> masked, bool normalize_target) {
  if (pred.rank() != 3 || pred.shape() != target.shape) {
    throw ShapeError("masked_patch_mse: pred and target must be matching [B, P, K]");
  }
  const std::size_t rows = pred.dim(0) * pred.dim(1), K = pred.dim(2);
  if (masked.size() != rows) throw ShapeError("masked_patch_mse: mask size differs from B * P");
  std::vector<std::int64_t> sel;
  for (std::size_t r = 0; r < rows; ++r) {
    if (masked[r]) sel.push_back(static_cast<std::int64_t>(r));
  }
  if (sel.empty()) throw std::invalid_argument("masked_patch_mse: no masked patches");
  std::vector<double> t(sel.size() * K);
  for (std::size_t i = 0; i < sel.size(); ++i) {
    const double* src = target.data.data() + static_cast<std::size_t>(sel[i]) * K;
    double mean = 0, var = 0;
    if (normalize_target) {
      for (std::size_t k = 0; k < K; ++k) mean += src[k];
      mean /= static_cast<double>(K);
      for (std::size_t k = 0; k < K; ++k) var += (src[k] - mean) * (src[k] - mean);
      var /= static_cast<double>(K > 1 ? K - 1 : 1);
    }
    const double scale = normalize_target ? 1.0 / std::sqrt(var + 1e-6) : 1.0;
    for (std::size_t k = 0; k < K; ++k) t[i * K + k] = (src[k] - mean) * scale;
  }
  Tensor p = ops::select_rows(ops::reshape(pred, {rows, K}), sel);
  Tensor loss = ops::mean(ops::square(ops::sub(p, Tensor::constant({sel.size(), K}, std::move(t)))));
  LossOutput out = finish(loss, static_cast<double>(sel.size()));
  out.parts["reconstruction"] = out.total;
  out.diagnostics["masked_patches"] = static_cast<double>(sel.size());
  return out;
}

std::vector<std::size_t> sample_patch_mask(std::size_t n, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in (0, 1)");
  auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  k = std::clamp<std::size_t>(k, 1, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::uint8_t> sample_span_mask(std::size_t length, std::size_t span, double ratio,
                                           Rng& rng) {
  if (length == 0) return {};
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in (0, 1)");
  span = std::clamp<std::size_t>(span, 1, length);
  const auto need = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(length) - 1e-9)));
  std::vector<std::uint8_t> mask(length, 0);
  std::size_t count = 0;
  while (count < need) {
    const std::size_t start = rng.below(length - span + 1);
    for (std::size_t t = start; t < start + span; ++t) {
      if (!mask[t]) {
        mask[t] = 1;
        ++count;
      }
    }
  }
  return mask;
}

std::vector<std::size_t> sample_distractors(std::span<const std::size_t> pool, std::size_t self,
                                            std::size_t k, Rng& rng) {
  std::vector<std::size_t> cand;
  for (std::size_t p : pool) {
    if (p != self) cand.push_back(p);
  }
  k = std::min(k, cand.size());
  for (std::size_t i = 0; i < k; ++i) std::swap(cand[i], cand[i + rng.below(cand.size() - i)]);
  cand.resize(k);
  return cand;
}

LossOutput wav2vec2_lite_loss(const Tensor& context, const Tensor& targets, const NdArray& mask,
                              const NdArray* pad_mask, double temperature,
                              std::size_t n_distractors, std::span<const std::uint64_t> seeds) {
  if (context.rank() != 3 || context.shape() != targets.shape()) {
    throw ShapeError("wav2vec2_lite_loss: context and targets must be matching [B, T, D]");
  }
  const std::size_t B = context.dim(0), T = context.dim(1), D = context.dim(2);
  if (mask.shape != Shape{B, T}) throw ShapeError("wav2vec2_lite_loss: mask must be [B, T]");
  if (seeds.size() != B) throw std::invalid_argument("wav2vec2_lite_loss: one seed per utterance");
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
  const std::size_t C = n_distractors + 1;
  std::vector<std::int64_t> anchor;     // masked frame rows into [B*T, D]
  auto cand = std::make_shared<std::vector<std::int64_t>>();  // gather map for [F, C, D]
  std::vector<double> bias;             // -inf for padded candidate slots
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::size_t> pool;
    for (std::size_t t = 0; t < T; ++t) {
      const bool valid = pad_mask == nullptr || pad_mask->data[b * T + t] > 0.5;
      if (valid && mask.data[b * T + t] > 0.5) pool.push_back(t);
    }
    if (pool.empty()) throw NoMaskedFrames("utterance " + std::to_string(b) + " has no masked frames");
    Rng rng(seeds[b]);
    for (std::size_t t : pool) {
      anchor.push_back(static_cast<std::int64_t>(b * T + t));
      std::vector<std::size_t> rows = {t};
      for (std::size_t d : sample_distractors(pool, t, n_distractors, rng)) rows.push_back(d);
      for (std::size_t c = 0; c < C; ++c) {
        const bool present = c < rows.size();
        bias.push_back(present ? 0.0 : kNegInf);
        for (std::size_t j = 0; j < D; ++j) {
          cand->push_back(present ? static_cast<std::int64_t>((b * T + rows[c]) * D + j) : -1);
        }
      }
    }
  }
  const std::size_t F = anchor.size();
  Tensor ctx = ops::l2_normalize_rows(ops::select_rows(ops::reshape(context, {B * T, D}), anchor), kEps);
  Tensor tgt = ops::l2_normalize_rows(ops::reshape(targets.detach(), {B * T, D}), kEps);
  Tensor cands = ops::gather(tgt, cand, {F, C, D});
  Tensor sims = ops::reshape(ops::bmm_nt(ops::reshape(ctx, {F, 1, D}), cands), {F, C});
  Tensor logits = ops::add(ops::mul_scalar(sims, 1.0 / temperature),
                           Tensor::constant({F, C}, std::move(bias)));
  std::vector<std::int64_t> zeros(F, 0);
  LossOutput out = finish(ops::cross_entropy(logits, zeros), static_cast<double>(F));
  out.parts["contrastive"] = out.total;
  out.diagnostics["masked_frames"] = static_cast<double>(F);
  return out;
}

}  // namespace sslkit
