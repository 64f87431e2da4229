#pragma once

// Samples, datasets, seeded augmentations and batch collation.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "sslkit/config.hpp"
#include "sslkit/rng.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit {

/// H x W x C, values in [0, 1].
struct Image {
  NdArray pixels;
  bool operator==(const Image&) const = default;
};

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 8000;
  bool operator==(const Waveform&) const = default;
};

/// Undirected graph stored as an edge list of (src[e], dst[e]) pairs.
struct Graph {
  NdArray x;  // N x F
  std::vector<std::int64_t> src;
  std::vector<std::int64_t> dst;
  std::size_t num_nodes() const { return x.shape.empty() ? 0 : x.shape[0]; }
  std::size_t num_edges() const { return src.size(); }
  bool operator==(const Graph&) const = default;
};

struct Tokens {
  std::vector<std::int64_t> ids;
  bool operator==(const Tokens&) const = default;
};

using Payload = std::variant<Image, Waveform, Graph, Tokens>;

struct Sample {
  Modality modality = Modality::kVision;
  Payload a;
  std::optional<Payload> b;  // second member of a cross-modal pair
  std::optional<std::int64_t> label;
  bool operator==(const Sample&) const = default;
};

struct DataError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ModalityMismatch : DataError {
  using DataError::DataError;
};
struct EmptyBatch : DataError {
  using DataError::DataError;
};
struct MixedSampleRate : DataError {
  using DataError::DataError;
};
struct DegenerateGraph : DataError {
  using DataError::DataError;
};

/// Checks the per-payload invariants (pixel range, finite audio, edge bounds).
void check_sample(const Sample& s);

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual Sample get(std::size_t index) const = 0;
  virtual Modality modality() const = 0;
};

class InMemoryDataset : public Dataset {
 public:
  InMemoryDataset(Modality m, std::vector<Sample> samples);
  std::size_t size() const override { return samples_.size(); }
  Sample get(std::size_t index) const override { return samples_.at(index); }
  Modality modality() const override { return modality_; }
  const std::vector<Sample>& samples() const { return samples_; }

 private:
  Modality modality_;
  std::vector<Sample> samples_;
};

/// Input geometry a backbone needs from the data.
struct DataShape {
  Modality modality = Modality::kVision;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t node_features = 0;
  std::size_t vocab_size = 0;
  int sample_rate = 8000;
  /// Payload kind of the second pair member for cross-modal data.
  std::string pair_b_kind;
  std::size_t num_classes = 0;
};
DataShape infer_data_shape(const Dataset& ds);

// ---------------------------------------------------------------------------
// Synthetic generators

struct ShapesOptions {
  std::size_t count = 400;
  std::size_t num_classes = 2;
  std::size_t image_size = 32;
  double noise = 0.05;
  std::uint64_t seed = 0;
};
/// Class-conditioned geometric shapes with random colour, size, position and
/// background clutter.
InMemoryDataset make_shapes(const ShapesOptions& opt);
/// One image of class `label` drawn with `rng`.
Image draw_shape(std::size_t label, std::size_t image_size, double noise, Rng& rng);

struct TonesOptions {
  std::size_t count = 200;
  std::size_t num_classes = 2;
  int sample_rate = 8000;
  std::size_t min_length = 320;
  std::size_t max_length = 480;
  double noise = 0.05;
  std::uint64_t seed = 0;
};
/// Class-conditioned sine mixtures of varying length.
InMemoryDataset make_tones(const TonesOptions& opt);
Waveform draw_tone(std::size_t label, std::size_t num_classes, std::size_t length,
                   int sample_rate, double noise, Rng& rng);

struct GraphsOptions {
  std::size_t count = 200;
  std::size_t min_nodes = 10;
  std::size_t max_nodes = 16;
  std::size_t features = 4;
  std::uint64_t seed = 0;
};
/// Two classes: sparse rings with chords versus hub-and-spoke graphs.
InMemoryDataset make_graphs(const GraphsOptions& opt);

struct PairsOptions {
  std::size_t count = 200;
  std::size_t num_classes = 4;
  std::size_t image_size = 16;
  std::string b_kind = "audio";  // audio | tokens
  std::size_t min_length = 256;
  std::size_t max_length = 320;
  double noise = 0.05;
  std::uint64_t seed = 0;
};
/// Class-aligned (shape image, tone or caption) pairs.
InMemoryDataset make_pairs(const PairsOptions& opt);

/// Fixed word-level vocabulary for the toy captions.
class ToyTokenizer {
 public:
  ToyTokenizer();
  std::vector<std::int64_t> encode(const std::string& text) const;
  std::size_t vocab_size() const { return words_.size(); }
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kUnk = 1;

 private:
  std::vector<std::string> words_;
};
std::string shape_class_name(std::size_t label);

/// Builds a dataset from a generator name and JSON parameters.
InMemoryDataset make_synthetic(const std::string& generator, const json& params);

// Directory layout: one JSON file per sample plus manifest.json.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir,
                   const json& generator_info = json::object());
InMemoryDataset read_dataset(const std::filesystem::path& dir);
json sample_to_json(const Sample& s);
Sample sample_from_json(const json& j);

// ---------------------------------------------------------------------------
// Augmentation

struct VisionAugment {
  std::size_t out_size = 32;
  double scale_min = 0.2;
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  double flip_p = 0.5;
  double jitter_p = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
  double gray_p = 0.2;
};

struct AudioAugment {
  double gain_db_min = -6.0;
  double gain_db_max = 6.0;
  double time_mask_max = 0.1;  // fraction of the waveform
  double noise_p = 0.5;
  double snr_db_min = 10.0;
  double snr_db_max = 30.0;
};

enum class GraphAugKind { kNodeDrop, kEdgePerturb, kAttributeMask, kSubgraph };
std::string_view graph_aug_name(GraphAugKind k);
std::optional<GraphAugKind> parse_graph_aug(std::string_view s);

struct GraphAugment {
  /// Each view applies one transform drawn uniformly from this list.
  std::vector<GraphAugKind> kinds = {GraphAugKind::kNodeDrop, GraphAugKind::kEdgePerturb,
                                     GraphAugKind::kAttributeMask, GraphAugKind::kSubgraph};
  double ratio = 0.2;
};

struct AugmentationPolicy {
  Modality modality = Modality::kVision;
  std::size_t n_views = 2;
  VisionAugment vision;
  AudioAugment audio;
  GraphAugment graph;
  bool enabled = true;

  /// Views are copies of the input.
  static AugmentationPolicy identity(Modality m, std::size_t n_views = 1);
  /// Throws DataError when a probability or ratio is out of range.
  void check() const;
  json to_json() const;
};

/// n_views transformed copies; a pure function of its arguments.
std::vector<Sample> make_views(const Sample& sample, const AugmentationPolicy& policy,
                               std::uint64_t rng_seed);

Image augment_image(const Image& img, const VisionAugment& p, Rng& rng);
Waveform augment_waveform(const Waveform& w, const AudioAugment& p, Rng& rng);
Graph graph_augment(const Graph& g, GraphAugKind kind, double ratio, std::uint64_t rng_seed);

// ---------------------------------------------------------------------------
// Batches

struct GraphBatch {
  NdArray x;  // total_nodes x F
  std::vector<std::int64_t> src;
  std::vector<std::int64_t> dst;
  std::vector<std::int64_t> graph_id;  // per node, nondecreasing
  std::size_t num_graphs = 0;
};

struct Batch {
  Modality modality = Modality::kVision;
  std::size_t size = 0;
  /// Dense views, each with leading dim `size`: images [B,H,W,C], audio [B,T],
  /// tokens [B,L].
  std::vector<NdArray> views;
  /// [B,T], 1 on valid frames. Shared by all audio or token views.
  std::optional<NdArray> pad_mask;
  std::vector<GraphBatch> graph_views;
  std::optional<NdArray> pair_a;
  std::optional<NdArray> pair_a_mask;
  std::optional<NdArray> pair_b;
  std::optional<NdArray> pair_b_mask;
  std::vector<std::int64_t> labels;
  /// Per-sample seeds for in-method randomness (masking, distractors).
  std::vector<std::uint64_t> sample_seeds;

  /// Rows [begin, end) of every field.
  Batch slice(std::size_t begin, std::size_t end) const;
};

Batch collate_images(const std::vector<Image>& images);
/// Zero-pads to the longest waveform; pad_mask marks original frames.
Batch collate_audio(const std::vector<Sample>& samples);
Batch collate_graphs(const std::vector<Sample>& samples);
GraphBatch batch_graphs(const std::vector<Graph>& graphs);
std::vector<Graph> disassemble(const GraphBatch& gb);
/// Inverse of the audio padding.
std::vector<std::vector<double>> strip_padding(const NdArray& padded, const NdArray& mask);

/// Dense [B, max_len] array plus mask for variable-length rows.
std::pair<NdArray, NdArray> pad_rows(const std::vector<std::vector<double>>& rows);

/// Collates per-sample view lists (all samples share n_views) into a Batch.
Batch collate_views(Modality m, const std::vector<std::vector<Sample>>& per_sample);

/// Loads `indices`, augments each sample with seed derive_seed(seed, epoch,
/// index) and collates.
Batch load_batch(const Dataset& ds, std::span<const std::size_t> indices,
                 const AugmentationPolicy& policy, std::uint64_t seed, std::uint64_t epoch);

}  // namespace sslkit
