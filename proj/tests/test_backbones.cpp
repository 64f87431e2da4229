#include <doctest.h>

#include <cmath>
#include <numeric>

#include "sslkit/backbones.hpp"
#include "sslkit/evaluation.hpp"
#include "support.hpp"

using namespace sslkit;

namespace {

Tensor forward_dense(Encoder& enc, const NdArray& x, const NdArray* mask = nullptr) {
  Tensor t = Tensor::constant(x);
  EncoderInput in;
  in.dense = &t;
  in.mask = mask;
  return enc.forward(in);
}

bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

class UserMlp : public Module {
 public:
  UserMlp(std::size_t in, std::size_t out, Rng& rng) { fc = add_module("fc", std::make_unique<Linear>(in, out, rng)); }
  Linear* fc;
};

}  // namespace

TEST_CASE("default vision encoders emit B x D") {
  Rng rng(1);
  auto vit = build_default(Modality::kVision, 128, rng);
  CHECK(vit->arch() == "tiny_vit");
  for (std::size_t B : {1u, 3u}) {
    const Tensor out = forward_dense(*vit, test::random_array({B, 32, 32, 3}, B));
    CHECK(out.shape() == Shape{B, 128});
    CHECK(all_finite(out));
  }
  EncoderSpec spec = default_spec(Modality::kVision, 32);
  spec.arch = "small_resnet";
  spec.width = 8;
  auto res = build_encoder(spec, rng);
  CHECK(forward_dense(*res, test::random_array({2, 32, 32, 3}, 2)).shape() == Shape{2, 32});
  spec.arch = "tiny_vit";
  spec.patch_size = 5;
  CHECK_THROWS(spec.check());
}

TEST_CASE("default graph encoder pools per graph") {
  Rng rng(2);
  const InMemoryDataset gs = make_graphs({2, 4, 6, 4, 1});
  const DataShape shape = infer_data_shape(gs);
  auto enc = build_default(Modality::kGraph, 64, rng, &shape);
  CHECK(enc->arch() == "gin");
  std::vector<Graph> graphs;
  for (const auto& s : gs.samples()) graphs.push_back(std::get<Graph>(s.a));
  const GraphBatch gb = batch_graphs(graphs);
  EncoderInput in;
  in.graph = &gb;
  CHECK(enc->forward(in).shape() == Shape{2, 64});
}

TEST_CASE("property: graph encoders are permutation invariant") {
  Rng rng(3);
  const InMemoryDataset gs = make_graphs({10, 6, 12, 4, 7});
  const DataShape shape = infer_data_shape(gs);
  for (const char* arch : {"gin", "gcn"}) {
    EncoderSpec spec = default_spec(Modality::kGraph, 16, &shape);
    spec.arch = arch;
    auto enc = build_encoder(spec, rng);
    for (const auto& s : gs.samples()) {
      const Graph& g = std::get<Graph>(s.a);
      const std::size_t n = g.num_nodes(), f = g.x.dim(1);
      std::vector<std::int64_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
      Graph p;
      p.x = NdArray({n, f});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < f; ++k) p.x.data[static_cast<std::size_t>(perm[i]) * f + k] = g.x.data[i * f + k];
      for (std::size_t e = 0; e < g.num_edges(); ++e) {
        p.src.push_back(perm[static_cast<std::size_t>(g.src[e])]);
        p.dst.push_back(perm[static_cast<std::size_t>(g.dst[e])]);
      }
      const GraphBatch a = batch_graphs({g}), b = batch_graphs({p});
      EncoderInput ia, ib;
      ia.graph = &a;
      ib.graph = &b;
      const Tensor ea = enc->forward(ia), eb = enc->forward(ib);
      for (std::size_t i = 0; i < ea.numel(); ++i) CHECK(std::abs(ea.at(i) - eb.at(i)) < 1e-5);
    }
  }
}

TEST_CASE("audio encoders ignore padding under the mask") {
  Rng rng(4);
  for (const char* arch : {"conv1d_audio", "transformer_audio"}) {
    EncoderSpec spec = default_spec(Modality::kAudio, 32);
    spec.arch = arch;
    spec.width = 16;
    spec.depth = 2;
    auto enc = build_encoder(spec, rng);
    const NdArray wave = test::random_array({1, 200}, 5, 0.3);
    const Tensor plain = forward_dense(*enc, wave, nullptr);
    for (std::size_t extra : {8u, 40u, 120u}) {
      NdArray padded({1, 200 + extra}, 0.0), mask({1, 200 + extra}, 0.0);
      for (std::size_t t = 0; t < 200; ++t) {
        padded.data[t] = wave.data[t];
        mask.data[t] = 1.0;
      }
      const Tensor p = forward_dense(*enc, padded, &mask);
      INFO(arch << " extra " << extra);
      for (std::size_t i = 0; i < plain.numel(); ++i) CHECK(std::abs(plain.at(i) - p.at(i)) < 1e-5);
    }
  }
}

TEST_CASE("text encoder embeds token ids") {
  Rng rng(6);
  EncoderSpec spec;
  spec.modality = Modality::kCrossmodal;
  spec.arch = "text_transformer";
  spec.embed_dim = 24;
  spec.width = 16;
  spec.depth = 1;
  spec.vocab_size = 40;
  auto enc = build_encoder(spec, rng);
  NdArray ids({2, 5}, std::vector<double>{2, 3, 4, 0, 0, 5, 6, 7, 8, 9});
  NdArray mask({2, 5}, std::vector<double>{1, 1, 1, 0, 0, 1, 1, 1, 1, 1});
  CHECK(forward_dense(*enc, ids, &mask).shape() == Shape{2, 24});
}

TEST_CASE("user modules are adopted after a shape probe") {
  Rng rng(7);
  auto mod = std::make_unique<UserMlp>(12, 256, rng);
  UserForward fwd = [](Module& m, const EncoderInput& in) {
    auto& u = static_cast<UserMlp&>(m);
    return u.fc->forward(ops::reshape(*in.dense, {in.dense->dim(0), 12}));
  };
  Tensor probe = Tensor::constant(test::random_array({2, 2, 2, 3}, 1));
  EncoderInput in;
  in.dense = &probe;
  auto enc = adopt_user_encoder(std::move(mod), fwd, Modality::kVision, in);
  CHECK(enc->embed_dim() == 256);
  CHECK(enc->forward(in).shape() == Shape{2, 256});

  auto seq = std::make_unique<UserMlp>(3, 8, rng);
  UserForward seq_fwd = [](Module& m, const EncoderInput& in) {
    return static_cast<UserMlp&>(m).fc->forward(ops::reshape(*in.dense, {2, 4, 3}));
  };
  try {
    adopt_user_encoder(std::move(seq), seq_fwd, Modality::kVision, in);
    FAIL("expected ShapeProbeFailure");
  } catch (const ShapeProbeFailure& e) {
    CHECK(e.observed_rank() == 3);
    CHECK(e.expected_rank() == 2);
  }
}

TEST_CASE("freeze leaves encoder weights untouched by a probe and is idempotent") {
  Rng rng(8);
  const InMemoryDataset train = make_shapes({24, 2, 16, 0.05, 1}), test_set = make_shapes({12, 2, 16, 0.05, 2});
  const DataShape shape = infer_data_shape(train);
  EncoderSpec spec = default_spec(Modality::kVision, 16, &shape);
  spec.width = 16;
  spec.depth = 1;
  auto enc = build_encoder(spec, rng);
  auto snapshot = [&] {
    std::vector<std::vector<double>> v;
    for (const auto& p : enc->named_parameters()) v.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    return v;
  };
  const auto before = snapshot();
  const Tensor out_before = forward_dense(*enc, test::random_array({2, 16, 16, 3}, 3));
  freeze(*enc);
  freeze(*enc);
  CHECK(enc->parameter_count(true) == 0);
  ProbeConfig pc;
  pc.epochs = 2;
  linear_probe(*enc, train, test_set, pc);
  CHECK(snapshot() == before);
  const Tensor out_after = forward_dense(*enc, test::random_array({2, 16, 16, 3}, 3));
  CHECK(out_before.array() == out_after.array());

  unfreeze_parameters(*enc);
  pc.freeze_backbone = false;
  linear_probe(*enc, train, test_set, pc);
  CHECK(snapshot() != before);
}

TEST_CASE("unsupported modality is rejected") {
  Rng rng(9);
  EncoderSpec spec = default_spec(Modality::kVision, 8);
  spec.arch = "gin";
  CHECK_THROWS(build_encoder(spec, rng));
}
