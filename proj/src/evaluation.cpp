#include "sslkit/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <Eigen/Dense>

#include "sslkit/optim.hpp"

namespace sslkit {

namespace {

void check_labels(std::span<const std::int64_t> y, std::size_t num_classes) {
  for (auto v : y) {
    if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
      throw LabelOutOfRange("label " + std::to_string(v) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    }
  }
}

std::vector<std::int64_t> argmax_rows(std::span<const double> v, std::size_t rows, std::size_t cols) {
  std::vector<std::int64_t> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = v.data() + i * cols;
    out[i] = std::max_element(r, r + cols) - r;
  }
  return out;
}

ProbeReport score(const std::vector<std::int64_t>& pred, std::span<const std::int64_t> y,
                  std::size_t num_classes) {
  ProbeReport rep;
  rep.confusion.assign(num_classes, std::vector<std::int64_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ++rep.confusion[static_cast<std::size_t>(y[i])][static_cast<std::size_t>(pred[i])];
    correct += pred[i] == y[i] ? 1 : 0;
  }
  rep.accuracy = y.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(y.size());
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto total = std::accumulate(rep.confusion[c].begin(), rep.confusion[c].end(), std::int64_t{0});
    rep.per_class_accuracy.push_back(
        total == 0 ? 0.0 : static_cast<double>(rep.confusion[c][c]) / static_cast<double>(total));
  }
  return rep;
}

class LinearHead : public Module {
 public:
  LinearHead(std::size_t in, std::size_t out, Rng& rng) {
    fc_ = add_module("fc", std::make_unique<Linear>(in, out, rng));
  }
  Tensor forward(const Tensor& x) { return fc_->forward(x); }

 private:
  Linear* fc_;
};

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace

ProbeConfig ProbeConfig::from(const EvalTemplate& t, std::uint64_t seed) {
  ProbeConfig c;
  c.num_classes = static_cast<std::size_t>(t.num_classes);
  c.batch_size = static_cast<std::size_t>(t.batch_size);
  c.lr = t.lr;
  c.epochs = static_cast<std::size_t>(t.epochs);
  c.freeze_backbone = t.freeze_backbone;
  c.seed = seed;
  return c;
}

void ProbeConfig::check() const {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (batch_size < 1 || epochs < 1) throw std::invalid_argument("batch_size and epochs must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("probe lr must be > 0");
}

json ProbeReport::to_json() const {
  return {{"accuracy", accuracy},
          {"per_class", per_class_accuracy},
          {"confusion_matrix", confusion},
          {"loss_curve", loss_curve}};
}

NdArray embed_dataset(Encoder& enc, const Dataset& ds, std::size_t batch_size, bool second) {
  if (ds.size() == 0) throw EmptyBatch("cannot embed an empty dataset");
  const auto policy = AugmentationPolicy::identity(ds.modality(), 1);
  NdArray out;
  NoGradGuard ng;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    Batch b = load_batch(ds, idx, policy, 0, 0);
    Tensor holder;
    EncoderInput in = ds.modality() == Modality::kCrossmodal ? pair_input(b, second, holder)
                                                             : view_input(b, 0, holder);
    NdArray e = enc.forward(in).array();
    if (out.shape.empty()) out.shape = {0, e.dim(1)};
    out.shape[0] += e.dim(0);
    out.data.insert(out.data.end(), e.data.begin(), e.data.end());
  }
  return out;
}

std::vector<std::int64_t> dataset_labels(const Dataset& ds) {
  std::vector<std::int64_t> y;
  y.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample s = ds.get(i);
    if (!s.label) throw std::invalid_argument("sample " + std::to_string(i) + " has no label");
    y.push_back(*s.label);
  }
  return y;
}

ProbeReport linear_probe_features(const NdArray& train_x, std::span<const std::int64_t> train_y,
                                  const NdArray& test_x, std::span<const std::int64_t> test_y,
                                  const ProbeConfig& cfg) {
  cfg.check();
  if (train_x.rank() != 2 || test_x.rank() != 2 || train_x.dim(1) != test_x.dim(1)) {
    throw DimMismatch("probe features must be [N, D] with matching D");
  }
  if (train_x.dim(0) != train_y.size() || test_x.dim(0) != test_y.size()) {
    throw std::invalid_argument("probe features and labels differ in length");
  }
  check_labels(train_y, cfg.num_classes);
  check_labels(test_y, cfg.num_classes);
  const std::size_t n = train_x.dim(0), d = train_x.dim(1);
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += train_x.data[i * d + j] / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = train_x.data[i * d + j] - mu[j];
      sd[j] += c * c / static_cast<double>(n);
    }
  for (double& s : sd) s = std::sqrt(s) + 1e-6;
  auto standardize = [&](const NdArray& x) {
    NdArray z = x;
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t j = 0; j < d; ++j) z.data[i * d + j] = (x.data[i * d + j] - mu[j]) / sd[j];
    return z;
  };
  const NdArray ztrain = standardize(train_x), ztest = standardize(test_x);

  Rng rng(derive_seed({cfg.seed, 0x9B0BE}));
  LinearHead head(d, cfg.num_classes, rng);
  Optimizer opt = build_optimizer(OptimizerKind::kAdam, head, cfg.lr, 0.0);
  std::vector<double> curve;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<std::int64_t> rows, y;
      for (std::size_t k = start; k < end; ++k) {
        rows.push_back(static_cast<std::int64_t>(order[k]));
        y.push_back(train_y[order[k]]);
      }
      Tensor x = ops::select_rows(Tensor::constant(ztrain), rows);
      Tensor loss = ops::cross_entropy(head.forward(x), y);
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += loss.item() * static_cast<double>(end - start);
    }
    curve.push_back(total / static_cast<double>(n));
  }
  NoGradGuard ng;
  Tensor logits = head.forward(Tensor::constant(ztest));
  ProbeReport rep = score(argmax_rows(logits.values(), test_x.dim(0), cfg.num_classes), test_y,
                          cfg.num_classes);
  rep.loss_curve = std::move(curve);
  return rep;
}

ProbeReport linear_probe(Encoder& enc, const Dataset& train, const Dataset& test,
                         const ProbeConfig& cfg) {
  cfg.check();
  const auto ytrain = dataset_labels(train), ytest = dataset_labels(test);
  check_labels(ytrain, cfg.num_classes);
  check_labels(ytest, cfg.num_classes);
  if (cfg.freeze_backbone) {
    return linear_probe_features(embed_dataset(enc, train, cfg.batch_size), ytrain,
                                 embed_dataset(enc, test, cfg.batch_size), ytest, cfg);
  }
  // Joint fine-tuning of encoder and classifier.
  Rng rng(derive_seed({cfg.seed, 0x9B0BE}));
  LinearHead head(enc.embed_dim(), cfg.num_classes, rng);
  std::vector<NamedTensor> params;
  for (auto& nt : head.named_parameters()) params.push_back({"head." + nt.name, nt.tensor});
  for (auto& nt : enc.named_parameters()) {
    if (nt.tensor.requires_grad()) params.push_back({"encoder." + nt.name, nt.tensor});
  }
  Optimizer opt(OptimizerKind::kAdam, params, cfg.lr, 0.0);
  const auto policy = AugmentationPolicy::identity(train.modality(), 1);
  std::vector<double> curve;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(train.size(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(
                                                       std::min(order.size(), start + cfg.batch_size)));
      Batch b = load_batch(train, idx, policy, cfg.seed, epoch);
      std::vector<std::int64_t> y;
      for (auto i : idx) y.push_back(ytrain[i]);
      Tensor holder;
      EncoderInput in = train.modality() == Modality::kCrossmodal ? pair_input(b, false, holder)
                                                                  : view_input(b, 0, holder);
      Tensor loss = ops::cross_entropy(head.forward(enc.forward(in)), y);
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += loss.item() * static_cast<double>(idx.size());
    }
    curve.push_back(total / static_cast<double>(train.size()));
  }
  NdArray e = embed_dataset(enc, test, cfg.batch_size);
  NoGradGuard ng;
  Tensor logits = head.forward(Tensor::constant(e));
  ProbeReport rep = score(argmax_rows(logits.values(), e.dim(0), cfg.num_classes), ytest,
                          cfg.num_classes);
  rep.loss_curve = std::move(curve);
  return rep;
}

PrototypeMatrix build_prototypes(const NdArray& embeddings, std::span<const std::int64_t> class_ids,
                                 std::size_t num_classes, std::vector<std::string> names) {
  if (num_classes < 2) throw std::invalid_argument("prototypes need at least 2 classes");
  if (embeddings.rank() != 2 || embeddings.dim(0) != class_ids.size()) {
    throw DimMismatch("embeddings must be [N, D] with one class id per row");
  }
  if (!names.empty() && names.size() != num_classes) {
    throw std::invalid_argument("class_names must have one entry per class");
  }
  const std::size_t d = embeddings.dim(1);
  PrototypeMatrix pm;
  pm.prototypes = NdArray({num_classes, d}, 0.0);
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    const auto c = class_ids[i];
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw LabelOutOfRange("class id " + std::to_string(c) + " out of range");
    }
    ++counts[static_cast<std::size_t>(c)];
    for (std::size_t j = 0; j < d; ++j) {
      pm.prototypes.data[static_cast<std::size_t>(c) * d + j] += embeddings.data[i * d + j];
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) throw MissingClass("class " + std::to_string(c) + " has no embeddings");
    double norm = 0.0;
    double* row = pm.prototypes.data.data() + c * d;
    for (std::size_t j = 0; j < d; ++j) {
      row[j] /= static_cast<double>(counts[c]);
      norm += row[j] * row[j];
    }
    norm = std::max(std::sqrt(norm), 1e-12);
    for (std::size_t j = 0; j < d; ++j) row[j] /= norm;
  }
  if (names.empty()) {
    for (std::size_t c = 0; c < num_classes; ++c) names.push_back("class_" + std::to_string(c));
  }
  pm.class_names = std::move(names);
  return pm;
}

ZeroShotResult zero_shot_classify(const NdArray& image_embs, const PrototypeMatrix& protos) {
  if (image_embs.rank() != 2 || image_embs.dim(1) != protos.prototypes.dim(1)) {
    throw DimMismatch("image embeddings have width " +
                      std::to_string(image_embs.rank() == 2 ? image_embs.dim(1) : 0) +
                      ", prototypes " + std::to_string(protos.prototypes.dim(1)));
  }
  NoGradGuard ng;
  Tensor img = ops::l2_normalize_rows(Tensor::constant(image_embs), 1e-8);
  Tensor scores = ops::matmul_nt(img, Tensor::constant(protos.prototypes));
  ZeroShotResult r;
  r.log_probs = ops::log_softmax_rows(scores).array();
  r.predictions = argmax_rows(r.log_probs.data, image_embs.dim(0), protos.prototypes.dim(0));
  return r;
}

NdArray project_embeddings(const NdArray& embs, std::size_t dim, const std::string& method) {
  if (method != "pca") throw std::invalid_argument("unknown projector '" + method + "'");
  if (dim != 2 && dim != 3) throw std::invalid_argument("projection dim must be 2 or 3");
  if (embs.rank() != 2 || embs.dim(0) <= dim) {
    throw std::invalid_argument("projection needs more points than output dimensions");
  }
  const auto n = static_cast<Eigen::Index>(embs.dim(0));
  const auto d = static_cast<Eigen::Index>(embs.dim(1));
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = embs.data[static_cast<std::size_t>(i * d + j)];
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd evals = es.eigenvalues();  // ascending
  const double scale = std::max(evals.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::MatrixXd comps = Eigen::MatrixXd::Zero(d, static_cast<Eigen::Index>(dim));
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(dim) && k < d; ++k) {
    const Eigen::Index src = d - 1 - k;
    if (evals(src) <= 1e-12 * scale) continue;  // beyond the data rank
    Eigen::VectorXd v = es.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    comps.col(k) = v;
  }
  const Eigen::MatrixXd y = x * comps;
  NdArray out({embs.dim(0), dim});
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(dim); ++k)
      out.data[static_cast<std::size_t>(i) * dim + static_cast<std::size_t>(k)] = y(i, k);
  return out;
}

double separation_ratio(const NdArray& points, std::span<const std::int64_t> labels) {
  if (points.rank() != 2 || points.dim(0) != labels.size()) {
    throw DimMismatch("points must be [N, k] with one label per row");
  }
  const std::size_t n = points.dim(0), k = points.dim(1);
  std::map<std::int64_t, std::pair<std::vector<double>, std::size_t>> cent;
  for (std::size_t i = 0; i < n; ++i) {
    auto& [sum, count] = cent[labels[i]];
    sum.resize(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) sum[j] += points.data[i * k + j];
    ++count;
  }
  if (cent.size() < 2) throw std::invalid_argument("separation ratio needs two classes");
  for (auto& [c, sc] : cent)
    for (double& v : sc.first) v /= static_cast<double>(sc.second);
  auto dist = [k](const double* a, const double* b) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return std::sqrt(s);
  };
  double intra = 0.0;
  for (std::size_t i = 0; i < n; ++i) intra += dist(points.data.data() + i * k, cent[labels[i]].first.data());
  intra /= static_cast<double>(n);
  double inter = 0.0;
  std::size_t pairs = 0;
  for (auto a = cent.begin(); a != cent.end(); ++a)
    for (auto b = std::next(a); b != cent.end(); ++b) {
      inter += dist(a->second.first.data(), b->second.first.data());
      ++pairs;
    }
  inter /= static_cast<double>(pairs);
  return inter / std::max(intra, 1e-12);
}

}  // namespace sslkit
