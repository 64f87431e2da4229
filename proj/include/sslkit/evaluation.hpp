#pragma once

// Downstream evaluation: linear probes, prototype zero-shot classification
// and low-dimensional projections of embeddings.

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sslkit/backbones.hpp"
#include "sslkit/config.hpp"
#include "sslkit/data.hpp"

namespace sslkit {

struct LabelOutOfRange : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct MissingClass : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DimMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ProbeConfig {
  std::size_t num_classes = 2;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t epochs = 10;
  bool freeze_backbone = true;
  std::uint64_t seed = 0;

  static ProbeConfig from(const EvalTemplate& t, std::uint64_t seed = 0);
  void check() const;
};

struct ProbeReport {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  std::vector<double> loss_curve;                     // mean train loss per epoch
  json to_json() const;
};

/// Embeddings [N, D] of every sample, in dataset order. For cross-modal data
/// `second` selects pair member b.
NdArray embed_dataset(Encoder& enc, const Dataset& ds, std::size_t batch_size, bool second = false);
std::vector<std::int64_t> dataset_labels(const Dataset& ds);

/// Softmax regression on fixed features, standardised with train statistics.
ProbeReport linear_probe_features(const NdArray& train_x, std::span<const std::int64_t> train_y,
                                  const NdArray& test_x, std::span<const std::int64_t> test_y,
                                  const ProbeConfig& cfg);

/// Linear classifier on encoder outputs. With freeze_backbone the encoder is
/// left untouched; otherwise it is fine-tuned jointly with the classifier.
ProbeReport linear_probe(Encoder& enc, const Dataset& train, const Dataset& test,
                         const ProbeConfig& cfg);

struct PrototypeMatrix {
  NdArray prototypes;  // [C, D]
  std::vector<std::string> class_names;
  bool normalized = true;
};

/// Per-class mean of `embeddings` rows, then L2 normalisation. Every class in
/// [0, num_classes) needs at least one row.
PrototypeMatrix build_prototypes(const NdArray& embeddings, std::span<const std::int64_t> class_ids,
                                 std::size_t num_classes, std::vector<std::string> names = {});

struct ZeroShotResult {
  NdArray log_probs;  // [B, C]
  std::vector<std::int64_t> predictions;
};

/// Cosine scores of L2-normalised image embeddings against the prototypes,
/// log-softmax per row.
ZeroShotResult zero_shot_classify(const NdArray& image_embs, const PrototypeMatrix& protos);

/// Centred PCA onto `dim` components. Components are ordered by variance and
/// signed so that their largest-magnitude entry is positive; components beyond
/// the data rank are zero.
NdArray project_embeddings(const NdArray& embs, std::size_t dim, const std::string& method = "pca");

/// Mean distance between class centroids divided by the mean distance of
/// points to their own class centroid.
double separation_ratio(const NdArray& points, std::span<const std::int64_t> labels);

}  // namespace sslkit
