#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "sslkit/backbones.hpp"
#include "sslkit/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace sslkit;
using namespace sslkit::test;

TEST_CASE("orthogonal-pair cases give ln((e+2)/e)") {
  CHECK(kOrthogonal == doctest::Approx(0.5514).epsilon(1e-4));
  const Tensor z = Tensor::constant({2, 2}, {1, 0, 0, 1});
  CHECK(std::abs(nt_xent(z, z, 1.0).total - kOrthogonal) < 1e-12);
  CHECK(std::abs(graphcl_loss(z, z, 1.0).total - kOrthogonal) < 1e-12);

  NegativeQueue queue(2, 3);
  queue.enqueue(NdArray({2, 3}, std::vector<double>{0, 1, 0, 0, 0, 1}));
  const Tensor q = Tensor::constant({1, 3}, {1, 0, 0});
  CHECK(std::abs(moco_loss(q, q, queue, 1.0).total - kOrthogonal) < 1e-12);

  // Three masked frames with one-hot targets: each frame sees two orthogonal distractors.
  const Tensor frames = Tensor::constant({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const std::uint64_t seed[] = {9};
  CHECK(std::abs(wav2vec2_lite_loss(frames, frames, full_mask(1, 3), nullptr, 1.0, 2, seed).total - kOrthogonal) <
        1e-12);
}

TEST_CASE("aligned orthogonal pairs give ln(1 + 1/e) for the two-tower loss") {
  CHECK(kAligned == doctest::Approx(0.3133).epsilon(1e-3));
  const Tensor z = Tensor::constant({2, 2}, {1, 0, 0, 1});
  const LossOutput out = clip_symmetric_loss(z, z, 1.0);
  CHECK(std::abs(out.total - kAligned) < 1e-12);
  CHECK(std::abs(out.parts.at("a_to_b") - kAligned) < 1e-12);
  const Tensor log_scale = Tensor::constant({1}, {0.0});
  CHECK(std::abs(clip_symmetric_loss(z, z, log_scale).total - kAligned) < 1e-12);
}

TEST_CASE("losses match brute-force oracles on random inputs") {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t B = 2 + rng.below(7), D = 2 + rng.below(15);
    const double tau = rng.uniform(0.05, 1.0);
    CAPTURE(B);
    CAPTURE(D);
    const Tensor a = random_param({B, D}, rng.next_u64()), b = random_param({B, D}, rng.next_u64());
    const Mat ma = rows_of(a), mb = rows_of(b);

    CHECK(std::abs(nt_xent(a, b, tau).total - oracle_nt_xent(ma, mb, tau)) < 1e-6);
    const double lambda = rng.uniform(0.001, 0.1);
    const LossOutput bt = barlow_twins(a, b, lambda);
    CHECK(std::abs(bt.total - oracle_barlow(ma, mb, lambda, 1e-5)) < 1e-6);
    CHECK(std::abs(bt.parts.at("on_diag") + lambda * bt.parts.at("off_diag") - bt.total) < 1e-9);
    CHECK(std::abs(clip_symmetric_loss(a, b, tau).total - oracle_clip(ma, mb, 1.0 / tau)) < 1e-6);
    CHECK(std::abs(byol_loss(a, b).total - oracle_byol(ma, mb)) < 1e-6);
    CHECK(std::abs(simsiam_loss(a, b, b, a).total - 0.5 * (oracle_byol(ma, ma) - 2.0)) < 1e-6);

    const std::size_t K = 1 + rng.below(8);
    NegativeQueue queue(K, D);
    const NdArray keys = random_array({K + 2, D}, rng.next_u64());
    queue.enqueue(keys);
    const Mat stored = rows_of(Tensor::constant(queue.snapshot()));
    CHECK(std::abs(moco_loss(a, b, queue, tau).total - oracle_moco(ma, mb, stored, tau)) < 1e-6);

    const std::size_t T = 3 + rng.below(6);
    const Tensor ctx = random_param({B, T, D}, rng.next_u64()), tgt = random_param({B, T, D}, rng.next_u64());
    NdArray mask({B, T}, 0.0), pad({B, T}, 1.0);
    for (std::size_t i = 0; i < B; ++i) {
      const std::size_t valid = 2 + rng.below(T - 1);
      for (std::size_t t = valid; t < T; ++t) pad.data[i * T + t] = 0.0;
      mask.data[i * T] = 1.0;
      for (std::size_t t = 1; t < T; ++t) mask.data[i * T + t] = rng.bernoulli(0.6);
    }
    const auto seeds = seeds_for(B);
    CHECK(std::abs(wav2vec2_lite_loss(ctx, tgt, mask, &pad, tau, T, seeds).total -
                   oracle_wav2vec2(ctx, tgt, mask, &pad, tau)) < 1e-6);
  }
}

TEST_CASE("simsiam oracle: negative mean cosine of predictions to stopped targets") {
  const Tensor p1 = random_param({4, 5}, 1), p2 = random_param({4, 5}, 2);
  const Tensor z1 = random_param({4, 5}, 3), z2 = random_param({4, 5}, 4);
  const Mat a = rows_of(p1), b = rows_of(p2), c = rows_of(z1), d = rows_of(z2);
  double s = 0;
  for (std::size_t i = 0; i < 4; ++i) s += -dotv(unit(a[i]), unit(d[i])) - dotv(unit(b[i]), unit(c[i]));
  CHECK(std::abs(simsiam_loss(p1, p2, z1, z2).total - 0.5 * s / 4.0) < 1e-12);
}

TEST_CASE("masked patch mse oracle") {
  Tensor pred = random_param({2, 4, 3}, 1);
  const NdArray target = random_array({2, 4, 3}, 2);
  const std::uint8_t masked[] = {1, 0, 1, 0, 0, 0, 1, 1};
  for (bool norm : {false, true}) {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < 8; ++r) {
      if (!masked[r]) continue;
      double mean = 0, var = 0;
      for (std::size_t k = 0; k < 3; ++k) mean += target.data[r * 3 + k];
      mean /= 3;
      for (std::size_t k = 0; k < 3; ++k) var += std::pow(target.data[r * 3 + k] - mean, 2);
      var /= 2;
      for (std::size_t k = 0; k < 3; ++k) {
        const double t = norm ? (target.data[r * 3 + k] - mean) / std::sqrt(var + 1e-6) : target.data[r * 3 + k];
        s += std::pow(pred.at(r * 3 + k) - t, 2);
        ++n;
      }
    }
    CHECK(std::abs(masked_patch_mse(pred, target, masked, norm).total - s / static_cast<double>(n)) < 1e-12);
  }
  // Unmasked predictions get no gradient.
  masked_patch_mse(pred, target, masked, false).loss.backward();
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t k = 0; k < 3; ++k)
      if (!masked[r]) CHECK(pred.grad()[r * 3 + k] == 0.0);
}

TEST_CASE("every loss matches central finite differences") {
  Rng rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t B = 2 + rng.below(5), D = 2 + rng.below(7);
    const double tau = rng.uniform(0.2, 1.0);
    Tensor a = random_param({B, D}, rng.next_u64()), b = random_param({B, D}, rng.next_u64());
    Tensor c = random_param({B, D}, rng.next_u64()), d = random_param({B, D}, rng.next_u64());
    CHECK(grad_error(a, [&] { return nt_xent(a, b, tau).loss; }) < 1e-4);
    CHECK(grad_error(b, [&] { return nt_xent(a, b, tau).loss; }) < 1e-4);
    CHECK(grad_error(a, [&] { return barlow_twins(a, b, 0.05).loss; }) < 1e-4);
    CHECK(grad_error(b, [&] { return barlow_twins(a, b, 0.05).loss; }) < 1e-4);
    CHECK(grad_error(a, [&] { return clip_symmetric_loss(a, b, tau).loss; }) < 1e-4);
    CHECK(grad_error(b, [&] { return clip_symmetric_loss(a, b, tau).loss; }) < 1e-4);
    Tensor log_scale = Tensor::parameter(NdArray({1}, std::log(1.0 / tau)));
    CHECK(grad_error(log_scale, [&] { return clip_symmetric_loss(a, b, log_scale).loss; }) < 1e-4);
    CHECK(grad_error(a, [&] { return byol_loss(a, b).loss; }) < 1e-4);
    CHECK(grad_error(a, [&] { return byol_symmetric(a, b, c, d).loss; }) < 1e-4);
    CHECK(grad_error(a, [&] { return simsiam_loss(a, b, c, d).loss; }) < 1e-4);
    NegativeQueue queue(6, D);
    queue.enqueue(random_array({6, D}, rng.next_u64()));
    CHECK(grad_error(a, [&] { return moco_loss(a, b, queue, tau).loss; }) < 1e-4);

    Tensor pred = random_param({B, 4, D}, rng.next_u64());
    const NdArray target = random_array({B, 4, D}, rng.next_u64());
    std::vector<std::uint8_t> masked(B * 4);
    for (auto& m : masked) m = rng.bernoulli(0.5);
    masked[0] = 1;
    CHECK(grad_error(pred, [&] { return masked_patch_mse(pred, target, masked, true).loss; }) < 1e-4);

    Tensor ctx = random_param({B, 5, D}, rng.next_u64());
    const Tensor tgt = random_param({B, 5, D}, rng.next_u64());
    const auto seeds = seeds_for(B);
    CHECK(grad_error(ctx, [&] { return wav2vec2_lite_loss(ctx, tgt, full_mask(B, 5), nullptr, tau, 3, seeds).loss; }) <
          1e-4);
  }
}

TEST_CASE("stop-gradient targets carry no gradient though the value depends on them") {
  Tensor p = random_param({4, 6}, 1), p2 = random_param({4, 6}, 2);
  Tensor t = random_param({4, 6}, 3), t2 = random_param({4, 6}, 4);

  auto byol = [&] { return byol_loss(p, t).loss; };
  CHECK(reached_grad(t, byol) == 0.0);
  CHECK(value_sensitivity(t, byol) > 1e-3);

  auto simsiam = [&] { return simsiam_loss(p, p2, t, t2).loss; };
  CHECK(reached_grad(t, simsiam) == 0.0);
  CHECK(reached_grad(t2, simsiam) == 0.0);
  CHECK(value_sensitivity(t2, simsiam) > 1e-3);

  NegativeQueue queue(5, 6);
  queue.enqueue(random_array({5, 6}, 5));
  auto moco = [&] { return moco_loss(p, t, queue, 0.2).loss; };
  CHECK(reached_grad(t, moco) == 0.0);
  CHECK(value_sensitivity(t, moco) > 1e-3);
  CHECK(reached_grad(p, moco) > 0.0);

  Tensor ctx = random_param({1, 4, 6}, 6), tgt = random_param({1, 4, 6}, 7);
  const std::uint64_t seed[] = {1};
  auto w2v = [&] { return wav2vec2_lite_loss(ctx, tgt, full_mask(1, 4), nullptr, 0.5, 3, seed).loss; };
  CHECK(reached_grad(tgt, w2v) == 0.0);
  CHECK(value_sensitivity(tgt, w2v) > 1e-3);
}

TEST_CASE("masked-autoencoder targets carry no gradient into masked pixels") {
  const MaeTargetProbe r = mae_target_probe();
  CHECK(r.masked_grad == 0.0);
  CHECK(r.masked_effect > 1e-4);
  CHECK(r.visible_grad > 0.0);
}

TEST_CASE("ema update interpolates elementwise") {
  Tensor target = Tensor::constant({3}, {1, 2, 3});
  const Tensor online = Tensor::constant({3}, {3, 2, 1});
  Tensor ts[] = {target};
  const Tensor os[] = {online};
  ema_update(ts, os, 0.75);
  CHECK(target.at(0) == doctest::Approx(1.5));
  CHECK(target.at(1) == doctest::Approx(2.0));
  CHECK(target.at(2) == doctest::Approx(2.5));
  CHECK_THROWS(ema_update(ts, os, 1.0));
}

TEST_CASE("negative queue is a FIFO of normalised keys") {
  NegativeQueue q(3, 2);
  CHECK(q.size() == 0);
  q.enqueue(NdArray({2, 2}, std::vector<double>{3, 4, 0, 2}));
  CHECK(q.size() == 2);
  q.enqueue(NdArray({2, 2}, std::vector<double>{1, 0, 0, -5}));
  CHECK(q.size() == 3);
  const NdArray s = q.snapshot();
  CHECK(s.data == std::vector<double>{0, 1, 1, 0, 0, -1});
  const NegativeQueue empty(2, 2);
  const Tensor z = random_param({2, 2}, 1);
  CHECK_THROWS_AS(moco_loss(z, z, empty, 0.2), EmptyQueue);
}

TEST_CASE("degenerate inputs are rejected") {
  const Tensor one = random_param({1, 4}, 1);
  CHECK_THROWS_AS(nt_xent(one, one, 0.5), DegenerateBatch);
  CHECK_THROWS_AS(clip_symmetric_loss(one, one, 0.5), DegenerateBatch);
  CHECK_THROWS_AS(barlow_twins(one, one, 0.01), DegenerateBatch);
  CHECK_THROWS_AS(nt_xent(random_param({2, 3}, 1), random_param({2, 4}, 2), 0.5), ShapeError);
  const Tensor ctx = random_param({1, 3, 2}, 3);
  const std::uint64_t seed[] = {1};
  CHECK_THROWS_AS(wav2vec2_lite_loss(ctx, ctx, NdArray({1, 3}, 0.0), nullptr, 0.5, 2, seed), NoMaskedFrames);
}

TEST_CASE("span masking covers between 50 and 59 frames") {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    Rng rng(seed);
    const auto m = sample_span_mask(100, 10, 0.5, rng);
    const auto count = std::accumulate(m.begin(), m.end(), std::size_t{0});
    CHECK(count >= 50);
    CHECK(count <= 59);
  }
}

TEST_CASE("patch masks draw ceil(ratio * n) distinct sorted indices") {
  Rng rng(1);
  for (std::size_t n : {4u, 16u, 64u}) {
    const auto idx = sample_patch_mask(n, 0.75, rng);
    CHECK(idx.size() == static_cast<std::size_t>(std::ceil(0.75 * n)));
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == idx.size());
    CHECK(idx.back() < n);
  }
}

TEST_CASE("distractors never come from padded frames") {
  // Padded frames are marked masked too and hold huge target values: if one
  // were drawn the loss would move when they change.
  const std::size_t T = 12, D = 3;
  const Tensor ctx = random_param({1, T, D}, 1);
  NdArray tgt_a = random_array({1, T, D}, 2), tgt_b = tgt_a;
  NdArray mask({1, T}, 1.0), pad({1, T}, 1.0);
  for (std::size_t t = 8; t < T; ++t) {
    pad.data[t] = 0.0;
    for (std::size_t j = 0; j < D; ++j) tgt_b.data[t * D + j] = 1e3 * (j + 1.0) * (t % 2 ? -1.0 : 1.0);
  }
  std::size_t draws = 0;
  for (std::uint64_t s = 0; draws < 10000; ++s) {
    const std::uint64_t seed[] = {s};
    const double la = wav2vec2_lite_loss(ctx, Tensor::constant(tgt_a), mask, &pad, 0.5, 3, seed).total;
    const double lb = wav2vec2_lite_loss(ctx, Tensor::constant(tgt_b), mask, &pad, 0.5, 3, seed).total;
    REQUIRE(la == lb);
    draws += 8 * 3;
  }
  Rng rng(5);
  const std::size_t pool[] = {0, 1, 2, 3, 4};
  for (int i = 0; i < 1000; ++i) {
    const auto d = sample_distractors(pool, 2, 3, rng);
    CHECK(d.size() == 3);
    CHECK(std::find(d.begin(), d.end(), 2) == d.end());
  }
}
