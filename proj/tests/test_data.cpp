#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "sslkit/data.hpp"
#include "support.hpp"

using namespace sslkit;

namespace {

Sample audio_sample(std::size_t len, std::uint64_t seed, int rate = 8000) {
  Rng rng(seed);
  Waveform w;
  w.sample_rate = rate;
  for (std::size_t i = 0; i < len; ++i) w.samples.push_back(rng.normal(0, 0.3));
  return {Modality::kAudio, w, std::nullopt, std::nullopt};
}

Graph random_graph(std::size_t n, std::size_t f, Rng& rng) {
  Graph g;
  g.x = NdArray({n, f});
  for (double& v : g.x.data) v = rng.normal();
  std::set<std::pair<std::int64_t, std::int64_t>> seen;
  // Ring backbone so every graph is connected, plus random chords.
  for (std::size_t i = 0; i < n; ++i) seen.insert({std::min(i, (i + 1) % n), std::max(i, (i + 1) % n)});
  for (std::size_t e = 0; e < n; ++e) {
    const auto a = static_cast<std::int64_t>(rng.below(n)), b = static_cast<std::int64_t>(rng.below(n));
    if (a != b) seen.insert({std::min(a, b), std::max(a, b)});
  }
  for (auto [a, b] : seen) {
    g.src.push_back(a);
    g.dst.push_back(b);
  }
  return g;
}

Sample graph_sample(const Graph& g) { return {Modality::kGraph, g, std::nullopt, std::nullopt}; }

std::set<std::pair<std::int64_t, std::int64_t>> edge_set(const Graph& g) {
  std::set<std::pair<std::int64_t, std::int64_t>> s;
  for (std::size_t e = 0; e < g.num_edges(); ++e) s.insert({std::min(g.src[e], g.dst[e]), std::max(g.src[e], g.dst[e])});
  return s;
}

bool valid_graph(const Graph& g) {
  for (std::size_t e = 0; e < g.num_edges(); ++e) {
    if (g.src[e] < 0 || g.dst[e] < 0) return false;
    if (static_cast<std::size_t>(g.src[e]) >= g.num_nodes() || static_cast<std::size_t>(g.dst[e]) >= g.num_nodes())
      return false;
  }
  return edge_set(g).size() == g.num_edges();
}

}  // namespace

TEST_CASE("audio collation pads with zeros and masks original frames") {
  const std::vector<Sample> s = {audio_sample(100, 1), audio_sample(80, 2), audio_sample(120, 3)};
  const Batch b = collate_audio(s);
  REQUIRE(b.views.size() == 1);
  CHECK(b.views[0].shape == Shape{3, 120});
  REQUIRE(b.pad_mask);
  const std::size_t want[] = {100, 80, 120};
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t valid = 0;
    for (std::size_t t = 0; t < 120; ++t) {
      valid += b.pad_mask->data[i * 120 + t] > 0.5;
      if (t >= want[i]) CHECK(b.views[0].data[i * 120 + t] == 0.0);
    }
    CHECK(valid == want[i]);
  }
  const Batch eq = collate_audio({audio_sample(50, 1), audio_sample(50, 2)});
  CHECK(std::all_of(eq.pad_mask->data.begin(), eq.pad_mask->data.end(), [](double v) { return v == 1.0; }));
  CHECK_THROWS_AS(collate_audio({}), EmptyBatch);
  CHECK_THROWS_AS(collate_audio({audio_sample(10, 1, 8000), audio_sample(10, 2, 16000)}), MixedSampleRate);
}

TEST_CASE("property: padding then stripping recovers waveforms bit-exactly") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Sample> s;
    const std::size_t n = 1 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) s.push_back(audio_sample(1 + rng.below(200), rng.next_u64()));
    const Batch b = collate_audio(s);
    const auto back = strip_padding(b.views[0], *b.pad_mask);
    REQUIRE(back.size() == n);
    for (std::size_t i = 0; i < n; ++i) CHECK(back[i] == std::get<Waveform>(s[i].a).samples);
  }
}

TEST_CASE("graph collation offsets edges and records graph ids") {
  Rng rng(3);
  const Graph g3 = random_graph(3, 2, rng), g4 = random_graph(4, 2, rng);
  const GraphBatch gb = batch_graphs({g3, g4});
  CHECK(gb.x.shape == Shape{7, 2});
  CHECK(gb.num_graphs == 2);
  CHECK(gb.graph_id == std::vector<std::int64_t>{0, 0, 0, 1, 1, 1, 1});
  for (std::size_t e = 0; e < g4.num_edges(); ++e) {
    CHECK(gb.src[g3.num_edges() + e] == g4.src[e] + 3);
    CHECK(gb.dst[g3.num_edges() + e] == g4.dst[e] + 3);
  }
  const GraphBatch single = batch_graphs({g4});
  CHECK(single.src == g4.src);
  CHECK(single.dst == g4.dst);
  CHECK_THROWS_AS(collate_graphs({}), EmptyBatch);
}

TEST_CASE("property: disassemble inverts graph batching") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Graph> gs;
    for (int i = 0; i < 20; ++i) gs.push_back(random_graph(2 + rng.below(10), 3, rng));
    CHECK(disassemble(batch_graphs(gs)) == gs);
  }
}

TEST_CASE("graph augmentations follow their counting rules") {
  Rng rng(5);
  const Graph g10 = random_graph(10, 3, rng);
  const Graph dropped = graph_augment(g10, GraphAugKind::kNodeDrop, 0.2, 1);
  CHECK(dropped.num_nodes() == 8);
  CHECK(valid_graph(dropped));

  Graph g4 = random_graph(4, 3, rng);
  const Graph masked = graph_augment(g4, GraphAugKind::kAttributeMask, 0.5, 2);
  std::size_t zero_rows = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    bool zero = true;
    for (std::size_t f = 0; f < 3; ++f) zero = zero && masked.x.data[i * 3 + f] == 0.0;
    zero_rows += zero;
  }
  CHECK(zero_rows == 2);
  CHECK(masked.src == g4.src);

  const Graph sub = graph_augment(g10, GraphAugKind::kSubgraph, 0.2, 3);
  CHECK(sub.num_nodes() == 8);
  CHECK(valid_graph(sub));

  Graph one;
  one.x = NdArray({1, 2}, 1.0);
  CHECK_THROWS_AS(graph_augment(one, GraphAugKind::kNodeDrop, 0.5, 1), DegenerateGraph);
}

TEST_CASE("property: edge perturbation keeps the edge count and validity") {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const Graph g = random_graph(4 + rng.below(12), 2, rng);
    const Graph p = graph_augment(g, GraphAugKind::kEdgePerturb, 0.2, rng.next_u64());
    CHECK(p.num_edges() == g.num_edges());
    CHECK(p.num_nodes() == g.num_nodes());
    CHECK(valid_graph(p));
    for (std::size_t e = 0; e < p.num_edges(); ++e) CHECK(p.src[e] != p.dst[e]);
  }
}

TEST_CASE("views are deterministic, distinct and shaped per the policy") {
  const InMemoryDataset ds = make_shapes({4, 2, 32, 0.05, 9});
  const Sample s = ds.get(0);
  AugmentationPolicy pol;
  pol.modality = Modality::kVision;
  pol.n_views = 2;
  const auto v1 = make_views(s, pol, 123), v2 = make_views(s, pol, 123);
  REQUIRE(v1.size() == 2);
  CHECK(v1 == v2);
  CHECK(!(v1[0] == v1[1]));
  for (const auto& v : v1) CHECK(std::get<Image>(v.a).pixels.shape == Shape{32, 32, 3});

  const auto id = make_views(s, AugmentationPolicy::identity(Modality::kVision, 1), 5);
  REQUIRE(id.size() == 1);
  CHECK(id[0].a == s.a);

  CHECK_THROWS_AS(make_views(audio_sample(10, 1), pol, 1), ModalityMismatch);
  AugmentationPolicy bad = pol;
  bad.vision.flip_p = 1.5;
  CHECK_THROWS_AS(bad.check(), DataError);
}

TEST_CASE("property: every view has leading dim B over random datasets") {
  Rng rng(31);
  const InMemoryDataset sets[] = {make_shapes({12, 2, 16, 0.05, 1}), make_tones({12, 2, 8000, 100, 200, 0.05, 2}),
                                  make_graphs({12, 6, 10, 3, 3}),
                                  make_pairs({12, 2, 16, "audio", 100, 150, 0.05, 4}),
                                  make_pairs({12, 2, 16, "tokens", 100, 150, 0.05, 5})};
  for (const auto& ds : sets) {
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t B = 1 + rng.below(8);
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < B; ++i) idx.push_back(rng.below(ds.size()));
      AugmentationPolicy pol = AugmentationPolicy::identity(ds.modality(), 2);
      pol.enabled = ds.modality() != Modality::kCrossmodal;
      const Batch b = load_batch(ds, idx, pol, 7, trial);
      CHECK(b.size == B);
      for (const auto& v : b.views) CHECK(v.dim(0) == B);
      for (const auto& g : b.graph_views) {
        CHECK(g.num_graphs == B);
        CHECK(std::is_sorted(g.graph_id.begin(), g.graph_id.end()));
        CHECK(g.graph_id.back() == static_cast<std::int64_t>(B - 1));
      }
      if (b.pad_mask) {
        for (std::size_t i = 0; i < B; ++i) {
          double row = 0;
          for (std::size_t t = 0; t < b.pad_mask->dim(1); ++t) row += b.pad_mask->data[i * b.pad_mask->dim(1) + t];
          CHECK(row >= 1.0);
        }
      }
      if (b.pair_a) CHECK(b.pair_a->dim(0) == B);
      if (b.pair_b) CHECK(b.pair_b->dim(0) == B);
      CHECK(b.labels.size() == B);
    }
  }
}

TEST_CASE("batches are a pure function of seed and epoch") {
  const InMemoryDataset ds = make_shapes({8, 2, 16, 0.05, 1});
  AugmentationPolicy pol;
  pol.vision.out_size = 16;
  const std::size_t idx[] = {0, 3, 5};
  const Batch a = load_batch(ds, idx, pol, 1, 0), b = load_batch(ds, idx, pol, 1, 0);
  const Batch c = load_batch(ds, idx, pol, 1, 1);
  CHECK(a.views == b.views);
  CHECK(a.views != c.views);
  const Batch s = a.slice(1, 3);
  CHECK(s.size == 2);
  CHECK(s.views[0].dim(0) == 2);
}

TEST_CASE("generators respect their options and samples are valid") {
  const InMemoryDataset shapes = make_shapes({20, 3, 16, 0.05, 1});
  CHECK(shapes.size() == 20);
  for (const auto& s : shapes.samples()) {
    check_sample(s);
    CHECK(*s.label < 3);
  }
  const InMemoryDataset tones = make_tones({10, 2, 8000, 100, 150, 0.05, 2});
  for (const auto& s : tones.samples()) {
    const auto& w = std::get<Waveform>(s.a);
    CHECK(w.samples.size() >= 100);
    CHECK(w.samples.size() <= 150);
  }
  const DataShape shape = infer_data_shape(shapes);
  CHECK(shape.image_size == 16);
  CHECK(shape.num_classes == 3);
  CHECK(make_shapes({5, 2, 16, 0.05, 4}).samples() == make_shapes({5, 2, 16, 0.05, 4}).samples());
  CHECK_THROWS(make_synthetic("nope", json::object()));
}

TEST_CASE("datasets round-trip through the directory layout") {
  const auto dir = test::scratch_dir("data_roundtrip");
  const InMemoryDataset pairs = make_pairs({6, 2, 16, "tokens", 100, 150, 0.05, 4});
  write_dataset(pairs, dir, {{"generator", "pairs"}});
  const json manifest = json::parse(std::ifstream(dir / "manifest.json"));
  CHECK(manifest["count"] == 6);
  CHECK(manifest["modality"] == "crossmodal");
  const InMemoryDataset back = read_dataset(dir);
  CHECK(back.samples() == pairs.samples());
  const InMemoryDataset graphs = make_graphs({4, 5, 8, 3, 1});
  for (const auto& s : graphs.samples()) CHECK(sample_from_json(sample_to_json(s)) == s);
}

TEST_CASE("toy tokenizer maps unknown words to unk") {
  ToyTokenizer tok;
  const auto ids = tok.encode("a red circle zzzz");
  CHECK(ids.size() == 4);
  CHECK(ids.back() == ToyTokenizer::kUnk);
  CHECK(tok.vocab_size() > 2);
}
