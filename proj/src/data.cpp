#include "sslkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_map>

namespace sslkit {

namespace {

std::size_t ceil_count(double ratio, std::size_t n) {
  // Guards products such as 0.1 * 30 landing a hair above an integer.
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
}

const char* payload_kind(const Payload& p) {
  switch (p.index()) {
    case 0: return "image";
    case 1: return "audio";
    case 2: return "graph";
    default: return "tokens";
  }
}

void check_payload(const Payload& p) {
  if (const auto* im = std::get_if<Image>(&p)) {
    if (im->pixels.rank() != 3) throw DataError("image must be H x W x C");
    for (double v : im->pixels.data) {
      if (!(v >= 0.0 && v <= 1.0)) throw DataError("image values must lie in [0, 1]");
    }
  } else if (const auto* w = std::get_if<Waveform>(&p)) {
    if (w->samples.empty()) throw DataError("waveform is empty");
    for (double v : w->samples) {
      if (!std::isfinite(v)) throw DataError("waveform contains non-finite values");
    }
    if (w->sample_rate <= 0) throw DataError("sample_rate must be positive");
  } else if (const auto* g = std::get_if<Graph>(&p)) {
    if (g->x.rank() != 2) throw DataError("node features must be N x F");
    if (g->src.size() != g->dst.size()) throw DataError("edge list arrays differ in length");
    const auto n = static_cast<std::int64_t>(g->num_nodes());
    for (std::size_t e = 0; e < g->src.size(); ++e) {
      if (g->src[e] < 0 || g->src[e] >= n || g->dst[e] < 0 || g->dst[e] >= n) {
        throw DataError("edge index out of range");
      }
    }
  }
}

}  // namespace

void check_sample(const Sample& s) {
  check_payload(s.a);
  if (s.b) check_payload(*s.b);
  if (s.modality == Modality::kCrossmodal && !s.b) {
    throw DataError("cross-modal sample needs both pair members");
  }
}

InMemoryDataset::InMemoryDataset(Modality m, std::vector<Sample> samples)
    : modality_(m), samples_(std::move(samples)) {
  for (const auto& s : samples_) {
    if (s.modality != m) throw ModalityMismatch("dataset sample has the wrong modality");
  }
}

DataShape infer_data_shape(const Dataset& ds) {
  DataShape shape;
  shape.modality = ds.modality();
  if (ds.size() == 0) return shape;
  const Sample s = ds.get(0);
  auto visit = [&](const Payload& p) {
    if (const auto* im = std::get_if<Image>(&p)) {
      shape.image_size = im->pixels.dim(0);
      shape.channels = im->pixels.dim(2);
    } else if (const auto* w = std::get_if<Waveform>(&p)) {
      shape.sample_rate = w->sample_rate;
    } else if (const auto* g = std::get_if<Graph>(&p)) {
      shape.node_features = g->x.dim(1);
    } else {
      shape.vocab_size = ToyTokenizer().vocab_size();
    }
  };
  visit(s.a);
  if (s.b) {
    visit(*s.b);
    shape.pair_b_kind = payload_kind(*s.b);
  }
  std::int64_t max_label = -1;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto l = ds.get(i).label;
    if (l) max_label = std::max(max_label, *l);
  }
  shape.num_classes = static_cast<std::size_t>(max_label + 1);
  return shape;
}

// ---------------------------------------------------------------------------
// Synthetic data

std::string shape_class_name(std::size_t label) {
  static const char* kNames[] = {"hbar",  "vbar", "circle",  "square",
                                 "cross", "ring", "diamond", "triangle"};
  return kNames[label % 8];
}

Image draw_shape(std::size_t label, std::size_t size, double noise, Rng& rng) {
  const double s = static_cast<double>(size);
  const double r = rng.uniform(0.22, 0.36) * s;
  const double cy = rng.uniform(r * 0.8, s - r * 0.8);
  const double cx = rng.uniform(r * 0.8, s - r * 0.8);
  double bg[3], fg[3];
  // Either polarity: the shape may be darker or brighter than the background.
  const bool light_on_dark = rng.bernoulli(0.5);
  for (int c = 0; c < 3; ++c) {
    const double lo = rng.uniform(0.0, 0.45);
    const double hi = rng.uniform(0.55, 1.0);
    bg[c] = light_on_dark ? lo : hi;
    fg[c] = light_on_dark ? hi : lo;
  }
  const double angle = rng.uniform(-0.25, 0.25);
  const double ca = std::cos(angle), sa = std::sin(angle);
  NdArray px({size, size, 3});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dy0 = (static_cast<double>(y) + 0.5 - cy) / r;
      const double dx0 = (static_cast<double>(x) + 0.5 - cx) / r;
      const double dx = ca * dx0 - sa * dy0;
      const double dy = sa * dx0 + ca * dy0;
      bool in = false;
      switch (label % 8) {
        case 0: in = std::abs(dx) <= 1.0 && std::abs(dy) <= 0.3; break;
        case 1: in = std::abs(dy) <= 1.0 && std::abs(dx) <= 0.3; break;
        case 2: in = dx * dx + dy * dy <= 1.0; break;
        case 3: in = std::abs(dx) <= 0.8 && std::abs(dy) <= 0.8; break;
        case 4: in = (std::abs(dx) <= 0.28 && std::abs(dy) <= 1.0) || (std::abs(dy) <= 0.28 && std::abs(dx) <= 1.0); break;
        case 5: {
          const double d = std::sqrt(dx * dx + dy * dy);
          in = d <= 1.0 && d >= 0.55;
          break;
        }
        case 6: in = std::abs(dx) + std::abs(dy) <= 1.0; break;
        case 7: in = dy >= -0.9 && dy <= 0.8 && std::abs(dx) <= 0.95 * (dy + 0.9) / 1.7; break;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        double v = in ? fg[c] : bg[c];
        v += noise * rng.normal();
        px.data[(y * size + x) * 3 + c] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return Image{std::move(px)};
}

InMemoryDataset make_shapes(const ShapesOptions& opt) {
  if (opt.num_classes < 1 || opt.num_classes > 8) throw DataError("shapes supports 1..8 classes");
  std::vector<Sample> out;
  out.reserve(opt.count);
  for (std::size_t i = 0; i < opt.count; ++i) {
    Rng rng(derive_seed({opt.seed, 0x5A9E5ULL, i}));
    const std::size_t label = i % opt.num_classes;
    Sample s;
    s.modality = Modality::kVision;
    s.a = draw_shape(label, opt.image_size, opt.noise, rng);
    s.label = static_cast<std::int64_t>(label);
    out.push_back(std::move(s));
  }
  return InMemoryDataset(Modality::kVision, std::move(out));
}

Waveform draw_tone(std::size_t label, std::size_t num_classes, std::size_t length,
                   int sample_rate, double noise, Rng& rng) {
  const double span = num_classes > 1 ? 3.0 / static_cast<double>(num_classes - 1) : 0.0;
  const double base = 200.0 * std::pow(2.0, span * static_cast<double>(label));
  const double f = base * rng.uniform(0.97, 1.03);
  const double amp = rng.uniform(0.5, 1.0);
  const double harm = rng.uniform(0.0, 0.5);
  const double ph1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ph2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(length);
  const double sr = static_cast<double>(sample_rate);
  for (std::size_t t = 0; t < length; ++t) {
    const double tt = static_cast<double>(t) / sr;
    w.samples[t] = amp * (std::sin(2 * std::numbers::pi * f * tt + ph1) +
                          harm * std::sin(4 * std::numbers::pi * f * tt + ph2)) +
                   noise * rng.normal();
  }
  return w;
}

InMemoryDataset make_tones(const TonesOptions& opt) {
  if (opt.min_length == 0 || opt.max_length < opt.min_length) {
    throw DataError("tones needs 0 < min_length <= max_length");
  }
  std::vector<Sample> out;
  for (std::size_t i = 0; i < opt.count; ++i) {
    Rng rng(derive_seed({opt.seed, 0x70E5ULL, i}));
    const std::size_t label = i % opt.num_classes;
    const std::size_t len = opt.min_length + rng.below(opt.max_length - opt.min_length + 1);
    Sample s;
    s.modality = Modality::kAudio;
    s.a = draw_tone(label, opt.num_classes, len, opt.sample_rate, opt.noise, rng);
    s.label = static_cast<std::int64_t>(label);
    out.push_back(std::move(s));
  }
  return InMemoryDataset(Modality::kAudio, std::move(out));
}

namespace {

void add_undirected(std::set<std::pair<std::int64_t, std::int64_t>>& edges, std::int64_t u,
                    std::int64_t v) {
  if (u == v) return;
  edges.insert({std::min(u, v), std::max(u, v)});
}

Graph graph_from_edges(NdArray x, const std::set<std::pair<std::int64_t, std::int64_t>>& edges) {
  Graph g;
  g.x = std::move(x);
  for (const auto& [u, v] : edges) {
    g.src.push_back(u);
    g.dst.push_back(v);
  }
  return g;
}

}  // namespace

InMemoryDataset make_graphs(const GraphsOptions& opt) {
  if (opt.min_nodes < 4 || opt.max_nodes < opt.min_nodes || opt.features == 0) {
    throw DataError("graphs needs min_nodes >= 4, max_nodes >= min_nodes, features >= 1");
  }
  std::vector<Sample> out;
  for (std::size_t i = 0; i < opt.count; ++i) {
    Rng rng(derive_seed({opt.seed, 0x6A0ULL, i}));
    const std::size_t label = i % 2;
    const std::size_t n = opt.min_nodes + rng.below(opt.max_nodes - opt.min_nodes + 1);
    const auto N = static_cast<std::int64_t>(n);
    std::set<std::pair<std::int64_t, std::int64_t>> edges;
    if (label == 0) {
      for (std::int64_t u = 0; u < N; ++u) add_undirected(edges, u, (u + 1) % N);
      const std::size_t chords = std::max<std::size_t>(1, n / 5);
      for (std::size_t c = 0; c < chords; ++c) {
        add_undirected(edges, static_cast<std::int64_t>(rng.below(n)),
                       static_cast<std::int64_t>(rng.below(n)));
      }
    } else {
      const std::int64_t hubs = 2;
      add_undirected(edges, 0, 1);
      for (std::int64_t u = hubs; u < N; ++u) {
        add_undirected(edges, u, static_cast<std::int64_t>(rng.below(hubs)));
      }
      const std::size_t extra = std::max<std::size_t>(1, n / 8);
      for (std::size_t c = 0; c < extra; ++c) {
        add_undirected(edges, static_cast<std::int64_t>(rng.below(n)),
                       static_cast<std::int64_t>(rng.below(n)));
      }
    }
    // Shuffle node ids so class identity is not encoded in the ordering.
    std::vector<std::int64_t> perm(n);
    for (std::size_t k = 0; k < n; ++k) perm[k] = static_cast<std::int64_t>(k);
    for (std::size_t k = n; k > 1; --k) std::swap(perm[k - 1], perm[rng.below(k)]);
    std::set<std::pair<std::int64_t, std::int64_t>> shuffled;
    for (const auto& [u, v] : edges) add_undirected(shuffled, perm[u], perm[v]);

    NdArray x({n, opt.features});
    for (std::size_t k = 0; k < n; ++k) {
      x.data[k * opt.features] = 1.0;
      for (std::size_t f = 1; f < opt.features; ++f) x.data[k * opt.features + f] = 0.1 * rng.normal();
    }
    Sample s;
    s.modality = Modality::kGraph;
    s.a = graph_from_edges(std::move(x), shuffled);
    s.label = static_cast<std::int64_t>(label);
    out.push_back(std::move(s));
  }
  return InMemoryDataset(Modality::kGraph, std::move(out));
}

ToyTokenizer::ToyTokenizer() {
  words_ = {"<pad>", "<unk>", "a",     "an",      "the",     "photo", "of",   "picture",
            "drawing", "shape", "small", "large", "bright", "dark",  "this", "is"};
  for (std::size_t c = 0; c < 8; ++c) words_.push_back(shape_class_name(c));
}

std::vector<std::int64_t> ToyTokenizer::encode(const std::string& text) const {
  std::vector<std::int64_t> ids;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    w = to_lower(w);
    auto it = std::find(words_.begin(), words_.end(), w);
    ids.push_back(it == words_.end() ? kUnk : static_cast<std::int64_t>(it - words_.begin()));
  }
  return ids;
}

InMemoryDataset make_pairs(const PairsOptions& opt) {
  if (opt.b_kind != "audio" && opt.b_kind != "tokens") {
    throw DataError("pairs b_kind must be audio or tokens");
  }
  if (opt.num_classes < 2 || opt.num_classes > 8) throw DataError("pairs supports 2..8 classes");
  static const char* kTemplates[] = {"a photo of a", "a drawing of a", "this is a",
                                     "a small",      "a large",        "the picture of a"};
  ToyTokenizer tok;
  std::vector<Sample> out;
  for (std::size_t i = 0; i < opt.count; ++i) {
    Rng rng(derive_seed({opt.seed, 0x9A125ULL, i}));
    const std::size_t label = i % opt.num_classes;
    Sample s;
    s.modality = Modality::kCrossmodal;
    s.a = draw_shape(label, opt.image_size, opt.noise, rng);
    if (opt.b_kind == "audio") {
      const std::size_t len = opt.min_length + rng.below(opt.max_length - opt.min_length + 1);
      s.b = draw_tone(label, opt.num_classes, len, 8000, opt.noise, rng);
    } else {
      const std::string text =
          std::string(kTemplates[rng.below(6)]) + " " + shape_class_name(label);
      s.b = Tokens{tok.encode(text)};
    }
    s.label = static_cast<std::int64_t>(label);
    out.push_back(std::move(s));
  }
  return InMemoryDataset(Modality::kCrossmodal, std::move(out));
}

InMemoryDataset make_synthetic(const std::string& generator, const json& params) {
  const json p = params.is_null() ? json::object() : params;
  auto get = [&](const char* key, auto def) {
    return p.contains(key) ? p.at(key).get<decltype(def)>() : def;
  };
  auto check_keys = [&](std::initializer_list<const char*> keys) {
    for (auto it = p.begin(); it != p.end(); ++it) {
      bool known = false;
      for (const char* k : keys) known = known || it.key() == k;
      if (!known) throw DataError("unknown " + generator + " parameter '" + it.key() + "'");
    }
  };
  if (generator == "shapes") {
    check_keys({"count", "num_classes", "image_size", "noise", "seed"});
    ShapesOptions o;
    o.count = get("count", o.count);
    o.num_classes = get("num_classes", o.num_classes);
    o.image_size = get("image_size", o.image_size);
    o.noise = get("noise", o.noise);
    o.seed = get("seed", o.seed);
    return make_shapes(o);
  }
  if (generator == "tones") {
    check_keys({"count", "num_classes", "sample_rate", "min_length", "max_length", "noise", "seed"});
    TonesOptions o;
    o.count = get("count", o.count);
    o.num_classes = get("num_classes", o.num_classes);
    o.sample_rate = get("sample_rate", o.sample_rate);
    o.min_length = get("min_length", o.min_length);
    o.max_length = get("max_length", o.max_length);
    o.noise = get("noise", o.noise);
    o.seed = get("seed", o.seed);
    return make_tones(o);
  }
  if (generator == "graphs") {
    check_keys({"count", "min_nodes", "max_nodes", "features", "seed"});
    GraphsOptions o;
    o.count = get("count", o.count);
    o.min_nodes = get("min_nodes", o.min_nodes);
    o.max_nodes = get("max_nodes", o.max_nodes);
    o.features = get("features", o.features);
    o.seed = get("seed", o.seed);
    return make_graphs(o);
  }
  if (generator == "pairs") {
    check_keys({"count", "num_classes", "image_size", "b_kind", "min_length", "max_length",
                "noise", "seed"});
    PairsOptions o;
    o.count = get("count", o.count);
    o.num_classes = get("num_classes", o.num_classes);
    o.image_size = get("image_size", o.image_size);
    o.b_kind = get("b_kind", o.b_kind);
    o.min_length = get("min_length", o.min_length);
    o.max_length = get("max_length", o.max_length);
    o.noise = get("noise", o.noise);
    o.seed = get("seed", o.seed);
    return make_pairs(o);
  }
  throw DataError("unknown generator '" + generator + "' (shapes, tones, graphs, pairs)");
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json payload_to_json(const Payload& p) {
  json j;
  j["kind"] = payload_kind(p);
  if (const auto* im = std::get_if<Image>(&p)) {
    j["shape"] = im->pixels.shape;
    j["data"] = im->pixels.data;
  } else if (const auto* w = std::get_if<Waveform>(&p)) {
    j["sample_rate"] = w->sample_rate;
    j["data"] = w->samples;
  } else if (const auto* g = std::get_if<Graph>(&p)) {
    j["shape"] = g->x.shape;
    j["data"] = g->x.data;
    j["src"] = g->src;
    j["dst"] = g->dst;
  } else {
    j["ids"] = std::get<Tokens>(p).ids;
  }
  return j;
}

Payload payload_from_json(const json& j) {
  const std::string kind = j.at("kind");
  if (kind == "image") {
    return Image{NdArray(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>())};
  }
  if (kind == "audio") {
    return Waveform{j.at("data").get<std::vector<double>>(), j.at("sample_rate").get<int>()};
  }
  if (kind == "graph") {
    Graph g;
    g.x = NdArray(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
    g.src = j.at("src").get<std::vector<std::int64_t>>();
    g.dst = j.at("dst").get<std::vector<std::int64_t>>();
    return g;
  }
  if (kind == "tokens") return Tokens{j.at("ids").get<std::vector<std::int64_t>>()};
  throw DataError("unknown payload kind '" + kind + "'");
}

}  // namespace

json sample_to_json(const Sample& s) {
  json j;
  j["modality"] = modality_name(s.modality);
  j["a"] = payload_to_json(s.a);
  if (s.b) j["b"] = payload_to_json(*s.b);
  if (s.label) j["label"] = *s.label;
  return j;
}

Sample sample_from_json(const json& j) {
  Sample s;
  const auto m = parse_modality(j.at("modality").get<std::string>());
  if (!m) throw DataError("unknown modality in sample");
  s.modality = *m;
  s.a = payload_from_json(j.at("a"));
  if (j.contains("b")) s.b = payload_from_json(j.at("b"));
  if (j.contains("label")) s.label = j.at("label").get<std::int64_t>();
  check_sample(s);
  return s;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir,
                   const json& generator_info) {
  std::filesystem::create_directories(dir);
  json files = json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::ostringstream name;
    name << "sample_" << std::setw(6) << std::setfill('0') << i << ".json";
    std::ofstream f(dir / name.str());
    if (!f) throw DataError("cannot write " + (dir / name.str()).string());
    f << sample_to_json(ds.get(i)).dump() << "\n";
    files.push_back(name.str());
  }
  json manifest = {{"format", "sslkit-dataset"},
                   {"version", 1},
                   {"modality", modality_name(ds.modality())},
                   {"count", ds.size()},
                   {"files", files},
                   {"generator", generator_info}};
  std::ofstream m(dir / "manifest.json");
  m << manifest.dump(2) << "\n";
}

InMemoryDataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.json");
  if (!m) throw DataError("missing manifest.json in " + dir.string());
  const json manifest = json::parse(m);
  const auto modality = parse_modality(manifest.at("modality").get<std::string>());
  if (!modality) throw DataError("manifest has an unknown modality");
  std::vector<Sample> samples;
  for (const auto& f : manifest.at("files")) {
    std::ifstream in(dir / f.get<std::string>());
    if (!in) throw DataError("missing sample file " + f.get<std::string>());
    samples.push_back(sample_from_json(json::parse(in)));
  }
  if (samples.size() != manifest.at("count").get<std::size_t>()) {
    throw DataError("manifest count does not match its file list");
  }
  return InMemoryDataset(*modality, std::move(samples));
}

// ---------------------------------------------------------------------------
// Augmentation

std::string_view graph_aug_name(GraphAugKind k) {
  switch (k) {
    case GraphAugKind::kNodeDrop: return "node_drop";
    case GraphAugKind::kEdgePerturb: return "edge_perturb";
    case GraphAugKind::kAttributeMask: return "attribute_mask";
    case GraphAugKind::kSubgraph: return "subgraph";
  }
  return "unknown";
}

std::optional<GraphAugKind> parse_graph_aug(std::string_view s) {
  if (s == "node_drop") return GraphAugKind::kNodeDrop;
  if (s == "edge_perturb") return GraphAugKind::kEdgePerturb;
  if (s == "attribute_mask") return GraphAugKind::kAttributeMask;
  if (s == "subgraph") return GraphAugKind::kSubgraph;
  return std::nullopt;
}

AugmentationPolicy AugmentationPolicy::identity(Modality m, std::size_t n_views) {
  AugmentationPolicy p;
  p.modality = m;
  p.n_views = n_views;
  p.enabled = false;
  return p;
}

void AugmentationPolicy::check() const {
  auto prob = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError(std::string(name) + " must lie in [0, 1]");
  };
  if (n_views < 1) throw DataError("n_views must be >= 1");
  prob(vision.flip_p, "flip_p");
  prob(vision.jitter_p, "jitter_p");
  prob(vision.gray_p, "gray_p");
  prob(audio.noise_p, "noise_p");
  prob(audio.time_mask_max, "time_mask_max");
  if (!(vision.scale_min > 0 && vision.scale_min <= vision.scale_max && vision.scale_max <= 1.0)) {
    throw DataError("crop scale range must satisfy 0 < min <= max <= 1");
  }
  if (!(graph.ratio > 0.0 && graph.ratio < 1.0)) throw DataError("graph ratio must lie in (0, 1)");
  if (graph.kinds.empty()) throw DataError("graph augmentation list is empty");
}

json AugmentationPolicy::to_json() const {
  json kinds = json::array();
  for (auto k : graph.kinds) kinds.push_back(graph_aug_name(k));
  return {{"modality", modality_name(modality)},
          {"n_views", n_views},
          {"enabled", enabled},
          {"vision",
           {{"out_size", vision.out_size}, {"scale", {vision.scale_min, vision.scale_max}},
            {"ratio", {vision.ratio_min, vision.ratio_max}}, {"flip_p", vision.flip_p},
            {"jitter_p", vision.jitter_p}, {"brightness", vision.brightness},
            {"contrast", vision.contrast}, {"saturation", vision.saturation},
            {"hue", vision.hue}, {"gray_p", vision.gray_p}}},
          {"audio",
           {{"gain_db", {audio.gain_db_min, audio.gain_db_max}},
            {"time_mask_max", audio.time_mask_max}, {"noise_p", audio.noise_p},
            {"snr_db", {audio.snr_db_min, audio.snr_db_max}}}},
          {"graph", {{"kinds", kinds}, {"ratio", graph.ratio}}}};
}

Image augment_image(const Image& img, const VisionAugment& p, Rng& rng) {
  const std::size_t H = img.pixels.dim(0), W = img.pixels.dim(1), C = img.pixels.dim(2);
  const double area = static_cast<double>(H * W);
  std::size_t ch = H, cw = W, ci = 0, cj = 0;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(p.scale_min, p.scale_max);
    const double log_r = rng.uniform(std::log(p.ratio_min), std::log(p.ratio_max));
    const double ratio = std::exp(log_r);
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && w <= W && h > 0 && h <= H) {
      ch = h;
      cw = w;
      ci = rng.below(H - h + 1);
      cj = rng.below(W - w + 1);
      found = true;
    }
  }
  const std::size_t S = p.out_size;
  NdArray out({S, S, C});
  const double sy = static_cast<double>(ch) / static_cast<double>(S);
  const double sx = static_cast<double>(cw) / static_cast<double>(S);
  for (std::size_t y = 0; y < S; ++y) {
    double fy = static_cast<double>(ci) + (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < S; ++x) {
      double fx = static_cast<double>(cj) + (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        auto at = [&](std::size_t yy, std::size_t xx) { return img.pixels.data[(yy * W + xx) * C + c]; };
        double v = at(y0, x0);
        if (wy != 0.0 || wx != 0.0) {
          v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
              wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        }
        out.data[(y * S + x) * C + c] = v;
      }
    }
  }

  if (rng.bernoulli(p.flip_p)) {
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S / 2; ++x) {
        for (std::size_t c = 0; c < C; ++c) {
          std::swap(out.data[(y * S + x) * C + c], out.data[(y * S + (S - 1 - x)) * C + c]);
        }
      }
    }
  }

  auto gray_of = [&](std::size_t pix) {
    const double* q = &out.data[pix * C];
    return C == 3 ? 0.299 * q[0] + 0.587 * q[1] + 0.114 * q[2] : q[0];
  };
  const std::size_t npix = S * S;
  if (rng.bernoulli(p.jitter_p)) {
    const double b = rng.uniform(1 - p.brightness, 1 + p.brightness);
    const double con = rng.uniform(1 - p.contrast, 1 + p.contrast);
    const double sat = rng.uniform(1 - p.saturation, 1 + p.saturation);
    const double hue = rng.uniform(-p.hue, p.hue);
    for (double& v : out.data) v = std::clamp(v * b, 0.0, 1.0);
    double mean_gray = 0;
    for (std::size_t i = 0; i < npix; ++i) mean_gray += gray_of(i);
    mean_gray /= static_cast<double>(npix);
    for (double& v : out.data) v = std::clamp((v - mean_gray) * con + mean_gray, 0.0, 1.0);
    if (C == 3) {
      for (std::size_t i = 0; i < npix; ++i) {
        const double g = gray_of(i);
        for (std::size_t c = 0; c < 3; ++c) {
          double& v = out.data[i * 3 + c];
          v = std::clamp((v - g) * sat + g, 0.0, 1.0);
        }
      }
      // Hue rotation in YIQ space.
      const double th = hue * 2.0 * std::numbers::pi;
      const double cs = std::cos(th), sn = std::sin(th);
      for (std::size_t i = 0; i < npix; ++i) {
        double* q = &out.data[i * 3];
        const double Y = 0.299 * q[0] + 0.587 * q[1] + 0.114 * q[2];
        const double I = 0.596 * q[0] - 0.274 * q[1] - 0.322 * q[2];
        const double Q = 0.211 * q[0] - 0.523 * q[1] + 0.312 * q[2];
        const double I2 = I * cs - Q * sn;
        const double Q2 = I * sn + Q * cs;
        q[0] = std::clamp(Y + 0.956 * I2 + 0.621 * Q2, 0.0, 1.0);
        q[1] = std::clamp(Y - 0.272 * I2 - 0.647 * Q2, 0.0, 1.0);
        q[2] = std::clamp(Y - 1.106 * I2 + 1.703 * Q2, 0.0, 1.0);
      }
    }
  }
  if (C == 3 && rng.bernoulli(p.gray_p)) {
    for (std::size_t i = 0; i < npix; ++i) {
      const double g = std::clamp(gray_of(i), 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) out.data[i * 3 + c] = g;
    }
  }
  return Image{std::move(out)};
}

Waveform augment_waveform(const Waveform& w, const AudioAugment& p, Rng& rng) {
  Waveform out = w;
  const double gain = std::pow(10.0, rng.uniform(p.gain_db_min, p.gain_db_max) / 20.0);
  for (double& v : out.samples) v *= gain;
  const std::size_t T = out.samples.size();
  const auto max_w = static_cast<std::size_t>(std::floor(p.time_mask_max * static_cast<double>(T)));
  const std::size_t width = rng.below(max_w + 1);
  const std::size_t start = rng.below(T - width + 1);
  std::fill(out.samples.begin() + static_cast<std::ptrdiff_t>(start),
            out.samples.begin() + static_cast<std::ptrdiff_t>(start + width), 0.0);
  if (rng.bernoulli(p.noise_p)) {
    const double snr = rng.uniform(p.snr_db_min, p.snr_db_max);
    double power = 0;
    for (double v : out.samples) power += v * v;
    power /= static_cast<double>(T);
    const double sd = std::sqrt(power / std::pow(10.0, snr / 10.0));
    for (double& v : out.samples) v += sd * rng.normal();
  }
  return out;
}

namespace {

/// Partial Fisher-Yates: k distinct indices from [0, n).
std::vector<std::size_t> choose(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

Graph induced_subgraph(const Graph& g, const std::vector<bool>& keep) {
  const std::size_t n = g.num_nodes(), F = g.x.dim(1);
  std::vector<std::int64_t> remap(n, -1);
  std::size_t m = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) remap[i] = static_cast<std::int64_t>(m++);
  }
  Graph out;
  out.x = NdArray({m, F});
  for (std::size_t i = 0; i < n; ++i) {
    if (remap[i] < 0) continue;
    std::copy_n(&g.x.data[i * F], F, &out.x.data[static_cast<std::size_t>(remap[i]) * F]);
  }
  for (std::size_t e = 0; e < g.num_edges(); ++e) {
    const auto u = remap[static_cast<std::size_t>(g.src[e])];
    const auto v = remap[static_cast<std::size_t>(g.dst[e])];
    if (u >= 0 && v >= 0) {
      out.src.push_back(u);
      out.dst.push_back(v);
    }
  }
  return out;
}

}  // namespace

Graph graph_augment(const Graph& g, GraphAugKind kind, double ratio, std::uint64_t rng_seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw DataError("graph augmentation ratio must lie in (0, 1)");
  const std::size_t n = g.num_nodes();
  if (n == 0) throw DegenerateGraph("graph has no nodes");
  Rng rng(rng_seed);
  switch (kind) {
    case GraphAugKind::kNodeDrop: {
      const std::size_t k = ceil_count(ratio, n);
      if (k >= n) throw DegenerateGraph("node_drop would remove every node");
      std::vector<bool> keep(n, true);
      for (std::size_t i : choose(n, k, rng)) keep[i] = false;
      return induced_subgraph(g, keep);
    }
    case GraphAugKind::kAttributeMask: {
      Graph out = g;
      const std::size_t F = g.x.dim(1);
      for (std::size_t i : choose(n, ceil_count(ratio, n), rng)) {
        std::fill_n(&out.x.data[i * F], F, 0.0);
      }
      return out;
    }
    case GraphAugKind::kEdgePerturb: {
      const std::size_t E = g.num_edges();
      const std::size_t m = ceil_count(ratio, E);
      std::vector<bool> drop(E, false);
      for (std::size_t e : choose(E, m, rng)) drop[e] = true;
      Graph out;
      out.x = g.x;
      std::set<std::pair<std::int64_t, std::int64_t>> present;
      for (std::size_t e = 0; e < E; ++e) {
        if (drop[e]) continue;
        out.src.push_back(g.src[e]);
        out.dst.push_back(g.dst[e]);
        present.insert({std::min(g.src[e], g.dst[e]), std::max(g.src[e], g.dst[e])});
      }
      // Candidate pairs are the absent unordered pairs; the m dropped edges
      // are among them, so m additions always exist.
      std::vector<std::pair<std::int64_t, std::int64_t>> candidates;
      for (std::int64_t u = 0; u < static_cast<std::int64_t>(n); ++u) {
        for (std::int64_t v = u + 1; v < static_cast<std::int64_t>(n); ++v) {
          if (!present.count({u, v})) candidates.push_back({u, v});
        }
      }
      for (std::size_t i : choose(candidates.size(), std::min(m, candidates.size()), rng)) {
        out.src.push_back(candidates[i].first);
        out.dst.push_back(candidates[i].second);
      }
      return out;
    }
    case GraphAugKind::kSubgraph: {
      const std::size_t target = ceil_count(1.0 - ratio, n);
      if (target == 0) throw DegenerateGraph("subgraph would keep no nodes");
      std::vector<std::vector<std::int64_t>> adj(n);
      for (std::size_t e = 0; e < g.num_edges(); ++e) {
        if (g.src[e] == g.dst[e]) continue;
        adj[static_cast<std::size_t>(g.src[e])].push_back(g.dst[e]);
        adj[static_cast<std::size_t>(g.dst[e])].push_back(g.src[e]);
      }
      std::vector<bool> keep(n, false);
      std::size_t kept = 0;
      auto visit = [&](std::size_t v) {
        if (!keep[v]) {
          keep[v] = true;
          ++kept;
        }
      };
      std::size_t cur = rng.below(n);
      visit(cur);
      std::size_t stale = 0;
      while (kept < target) {
        if (adj[cur].empty() || stale > 10 * n) {
          // Restart at a uniformly chosen unvisited node.
          std::vector<std::size_t> unvisited;
          for (std::size_t v = 0; v < n; ++v) {
            if (!keep[v]) unvisited.push_back(v);
          }
          cur = unvisited[rng.below(unvisited.size())];
          visit(cur);
          stale = 0;
          continue;
        }
        cur = static_cast<std::size_t>(adj[cur][rng.below(adj[cur].size())]);
        const std::size_t before = kept;
        visit(cur);
        stale = kept == before ? stale + 1 : 0;
      }
      return induced_subgraph(g, keep);
    }
  }
  throw DataError("unknown graph augmentation");
}

std::vector<Sample> make_views(const Sample& sample, const AugmentationPolicy& policy,
                               std::uint64_t rng_seed) {
  if (policy.modality != sample.modality) {
    throw ModalityMismatch(std::string("policy is for ") +
                           std::string(modality_name(policy.modality)) + ", sample is " +
                           std::string(modality_name(sample.modality)));
  }
  std::vector<Sample> views;
  views.reserve(policy.n_views);
  for (std::size_t v = 0; v < policy.n_views; ++v) {
    Sample out = sample;
    if (policy.enabled && sample.modality != Modality::kCrossmodal) {
      Rng rng(derive_seed({rng_seed, 0xA06ULL, v}));
      if (const auto* im = std::get_if<Image>(&sample.a)) {
        out.a = augment_image(*im, policy.vision, rng);
      } else if (const auto* w = std::get_if<Waveform>(&sample.a)) {
        out.a = augment_waveform(*w, policy.audio, rng);
      } else if (const auto* g = std::get_if<Graph>(&sample.a)) {
        const auto kind = policy.graph.kinds[rng.below(policy.graph.kinds.size())];
        out.a = graph_augment(*g, kind, policy.graph.ratio, rng.next_u64());
      }
    }
    views.push_back(std::move(out));
  }
  return views;
}

// ---------------------------------------------------------------------------
// Collation

std::pair<NdArray, NdArray> pad_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw EmptyBatch("no rows to pad");
  std::size_t T = 0;
  for (const auto& r : rows) T = std::max(T, r.size());
  NdArray data({rows.size(), T}, 0.0);
  NdArray mask({rows.size(), T}, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].empty()) throw DataError("empty sequence in batch");
    std::copy(rows[i].begin(), rows[i].end(), data.data.begin() + static_cast<std::ptrdiff_t>(i * T));
    std::fill_n(mask.data.begin() + static_cast<std::ptrdiff_t>(i * T), rows[i].size(), 1.0);
  }
  return {std::move(data), std::move(mask)};
}

std::vector<std::vector<double>> strip_padding(const NdArray& padded, const NdArray& mask) {
  const std::size_t B = padded.dim(0), T = padded.dim(1);
  std::vector<std::vector<double>> out(B);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t t = 0; t < T; ++t) {
      if (mask.data[i * T + t] != 0.0) out[i].push_back(padded.data[i * T + t]);
    }
  }
  return out;
}

Batch collate_images(const std::vector<Image>& images) {
  if (images.empty()) throw EmptyBatch("cannot collate an empty batch");
  const Shape s = images[0].pixels.shape;
  NdArray stacked({images.size(), s[0], s[1], s[2]});
  const std::size_t per = shape_numel(s);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].pixels.shape != s) throw ShapeError("images in a batch must share a shape");
    std::copy(images[i].pixels.data.begin(), images[i].pixels.data.end(),
              stacked.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  Batch b;
  b.modality = Modality::kVision;
  b.size = images.size();
  b.views.push_back(std::move(stacked));
  return b;
}

namespace {

std::vector<std::int64_t> collect_labels(const std::vector<const Sample*>& samples) {
  std::vector<std::int64_t> labels;
  for (const auto* s : samples) {
    if (!s->label) return {};
    labels.push_back(*s->label);
  }
  return labels;
}

struct Dense {
  NdArray data;
  std::optional<NdArray> mask;
};

Dense collate_payloads(const std::vector<const Payload*>& ps) {
  if (ps.empty()) throw EmptyBatch("cannot collate an empty batch");
  if (std::holds_alternative<Image>(*ps[0])) {
    std::vector<Image> imgs;
    for (const auto* p : ps) imgs.push_back(std::get<Image>(*p));
    return {std::move(collate_images(imgs).views[0]), std::nullopt};
  }
  if (std::holds_alternative<Waveform>(*ps[0])) {
    const int sr = std::get<Waveform>(*ps[0]).sample_rate;
    std::vector<std::vector<double>> rows;
    for (const auto* p : ps) {
      const auto& w = std::get<Waveform>(*p);
      if (w.sample_rate != sr) throw MixedSampleRate("waveforms in a batch differ in sample_rate");
      rows.push_back(w.samples);
    }
    auto [data, mask] = pad_rows(rows);
    return {std::move(data), std::move(mask)};
  }
  if (std::holds_alternative<Tokens>(*ps[0])) {
    std::vector<std::vector<double>> rows;
    for (const auto* p : ps) {
      const auto& ids = std::get<Tokens>(*p).ids;
      rows.emplace_back(ids.begin(), ids.end());
    }
    auto [data, mask] = pad_rows(rows);
    return {std::move(data), std::move(mask)};
  }
  throw DataError("graph payloads collate through batch_graphs");
}

}  // namespace

Batch collate_audio(const std::vector<Sample>& samples) {
  if (samples.empty()) throw EmptyBatch("cannot collate an empty batch");
  std::vector<std::vector<Sample>> per;
  for (const auto& s : samples) {
    if (!std::holds_alternative<Waveform>(s.a)) throw ModalityMismatch("collate_audio needs audio samples");
    per.push_back({s});
  }
  return collate_views(Modality::kAudio, per);
}

GraphBatch batch_graphs(const std::vector<Graph>& graphs) {
  if (graphs.empty()) throw EmptyBatch("cannot collate an empty batch");
  const std::size_t F = graphs[0].x.dim(1);
  std::size_t total = 0;
  for (const auto& g : graphs) {
    if (g.x.dim(1) != F) throw ShapeError("graphs in a batch must share a feature width");
    total += g.num_nodes();
  }
  GraphBatch gb;
  gb.x = NdArray({total, F});
  gb.num_graphs = graphs.size();
  std::int64_t offset = 0;
  for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
    const auto& g = graphs[gi];
    std::copy(g.x.data.begin(), g.x.data.end(),
              gb.x.data.begin() + static_cast<std::ptrdiff_t>(offset) * static_cast<std::ptrdiff_t>(F));
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
      gb.src.push_back(g.src[e] + offset);
      gb.dst.push_back(g.dst[e] + offset);
    }
    gb.graph_id.insert(gb.graph_id.end(), g.num_nodes(), static_cast<std::int64_t>(gi));
    offset += static_cast<std::int64_t>(g.num_nodes());
  }
  return gb;
}

std::vector<Graph> disassemble(const GraphBatch& gb) {
  const std::size_t F = gb.x.dim(1);
  std::vector<std::size_t> counts(gb.num_graphs, 0), start(gb.num_graphs, 0);
  for (auto id : gb.graph_id) ++counts[static_cast<std::size_t>(id)];
  for (std::size_t g = 1; g < gb.num_graphs; ++g) start[g] = start[g - 1] + counts[g - 1];
  std::vector<Graph> out(gb.num_graphs);
  for (std::size_t g = 0; g < gb.num_graphs; ++g) {
    out[g].x = NdArray({counts[g], F});
    std::copy_n(gb.x.data.begin() + static_cast<std::ptrdiff_t>(start[g] * F), counts[g] * F,
                out[g].x.data.begin());
  }
  for (std::size_t e = 0; e < gb.src.size(); ++e) {
    const auto g = static_cast<std::size_t>(gb.graph_id[static_cast<std::size_t>(gb.src[e])]);
    const auto off = static_cast<std::int64_t>(start[g]);
    out[g].src.push_back(gb.src[e] - off);
    out[g].dst.push_back(gb.dst[e] - off);
  }
  return out;
}

Batch collate_graphs(const std::vector<Sample>& samples) {
  if (samples.empty()) throw EmptyBatch("cannot collate an empty batch");
  std::vector<std::vector<Sample>> per;
  for (const auto& s : samples) {
    if (!std::holds_alternative<Graph>(s.a)) throw ModalityMismatch("collate_graphs needs graph samples");
    per.push_back({s});
  }
  return collate_views(Modality::kGraph, per);
}

Batch collate_views(Modality m, const std::vector<std::vector<Sample>>& per_sample) {
  if (per_sample.empty()) throw EmptyBatch("cannot collate an empty batch");
  const std::size_t n_views = per_sample[0].size();
  for (const auto& v : per_sample) {
    if (v.size() != n_views || n_views == 0) throw DataError("samples disagree on view count");
  }
  Batch b;
  b.modality = m;
  b.size = per_sample.size();
  std::vector<const Sample*> firsts;
  for (const auto& v : per_sample) firsts.push_back(&v[0]);
  b.labels = collect_labels(firsts);

  if (m == Modality::kCrossmodal) {
    std::vector<const Payload*> as, bs;
    for (const auto* s : firsts) {
      if (!s->b) throw DataError("cross-modal sample without a pair");
      as.push_back(&s->a);
      bs.push_back(&*s->b);
    }
    auto a = collate_payloads(as);
    auto c = collate_payloads(bs);
    b.pair_a = std::move(a.data);
    b.pair_a_mask = std::move(a.mask);
    b.pair_b = std::move(c.data);
    b.pair_b_mask = std::move(c.mask);
    return b;
  }
  for (std::size_t v = 0; v < n_views; ++v) {
    if (m == Modality::kGraph) {
      std::vector<Graph> gs;
      for (const auto& s : per_sample) gs.push_back(std::get<Graph>(s[v].a));
      b.graph_views.push_back(batch_graphs(gs));
      continue;
    }
    std::vector<const Payload*> ps;
    for (const auto& s : per_sample) ps.push_back(&s[v].a);
    auto d = collate_payloads(ps);
    b.views.push_back(std::move(d.data));
    if (v == 0 && d.mask) b.pad_mask = std::move(d.mask);
  }
  return b;
}

namespace {

NdArray slice_array(const NdArray& a, std::size_t begin, std::size_t end) {
  Shape s = a.shape;
  const std::size_t per = a.numel() / s[0];
  s[0] = end - begin;
  return NdArray(s, std::vector<double>(a.data.begin() + static_cast<std::ptrdiff_t>(begin * per),
                                        a.data.begin() + static_cast<std::ptrdiff_t>(end * per)));
}

GraphBatch slice_graphs(const GraphBatch& gb, std::size_t begin, std::size_t end) {
  auto graphs = disassemble(gb);
  return batch_graphs(std::vector<Graph>(graphs.begin() + static_cast<std::ptrdiff_t>(begin),
                                         graphs.begin() + static_cast<std::ptrdiff_t>(end)));
}

}  // namespace

Batch Batch::slice(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > size) throw EmptyBatch("empty or out-of-range batch slice");
  Batch out;
  out.modality = modality;
  out.size = end - begin;
  for (const auto& v : views) out.views.push_back(slice_array(v, begin, end));
  if (pad_mask) out.pad_mask = slice_array(*pad_mask, begin, end);
  for (const auto& g : graph_views) out.graph_views.push_back(slice_graphs(g, begin, end));
  if (pair_a) out.pair_a = slice_array(*pair_a, begin, end);
  if (pair_a_mask) out.pair_a_mask = slice_array(*pair_a_mask, begin, end);
  if (pair_b) out.pair_b = slice_array(*pair_b, begin, end);
  if (pair_b_mask) out.pair_b_mask = slice_array(*pair_b_mask, begin, end);
  if (!labels.empty()) out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                                         labels.begin() + static_cast<std::ptrdiff_t>(end));
  if (!sample_seeds.empty()) {
    out.sample_seeds.assign(sample_seeds.begin() + static_cast<std::ptrdiff_t>(begin),
                            sample_seeds.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Batch load_batch(const Dataset& ds, std::span<const std::size_t> indices,
                 const AugmentationPolicy& policy, std::uint64_t seed, std::uint64_t epoch) {
  if (indices.empty()) throw EmptyBatch("cannot load an empty batch");
  std::vector<std::vector<Sample>> per;
  std::vector<std::uint64_t> seeds;
  for (std::size_t idx : indices) {
    const std::uint64_t s = derive_seed({seed, epoch, idx});
    per.push_back(make_views(ds.get(idx), policy, s));
    seeds.push_back(s);
  }
  Batch b = collate_views(ds.modality(), per);
  b.sample_seeds = std::move(seeds);
  return b;
}

}  // namespace sslkit
