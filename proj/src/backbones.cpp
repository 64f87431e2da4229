#include "sslkit/backbones.hpp"

#include <cmath>

namespace sslkit {

ShapeProbeFailure::ShapeProbeFailure(std::size_t observed_rank, std::size_t expected_rank,
                                     std::string detail)
    : std::runtime_error("shape probe failed: observed rank " + std::to_string(observed_rank) +
                         ", expected rank " + std::to_string(expected_rank) +
                         (detail.empty() ? "" : " (" + detail + ")")),
      observed_(observed_rank),
      expected_(expected_rank) {}

std::size_t EncoderInput::batch_size() const {
  if (graph != nullptr) return graph->num_graphs;
  if (dense != nullptr) return dense->dim(0);
  return 0;
}

void EncoderSpec::check() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("encoder spec: " + m); };
  if (embed_dim == 0) fail("embed_dim must be > 0");
  if (width == 0 || depth == 0) fail("width and depth must be > 0");
  if (arch == "tiny_vit") {
    if (patch_size == 0 || image_size % patch_size != 0) {
      fail("patch_size " + std::to_string(patch_size) + " does not divide image_size " +
           std::to_string(image_size));
    }
    if (width % heads != 0) fail("width must be divisible by heads");
  } else if (arch == "small_resnet") {
  } else if (arch == "conv1d_audio" || arch == "transformer_audio") {
    if (frame_kernel == 0 || frame_stride == 0) fail("frame kernel and stride must be > 0");
    if (arch == "transformer_audio" && embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  } else if (arch == "gin" || arch == "gcn") {
    if (in_features == 0) fail("graph encoders need in_features > 0");
  } else if (arch == "text_transformer") {
    if (vocab_size == 0) fail("text encoder needs vocab_size > 0");
    if (width % heads != 0) fail("width must be divisible by heads");
  } else {
    fail("unknown architecture '" + arch + "'");
  }
}

json EncoderSpec::to_json() const {
  return {{"modality", modality_name(modality)}, {"arch", arch},
          {"embed_dim", embed_dim},              {"width", width},
          {"depth", depth},                      {"heads", heads},
          {"patch_size", patch_size},            {"image_size", image_size},
          {"channels", channels},                {"in_features", in_features},
          {"vocab_size", vocab_size},            {"max_len", max_len}};
}

namespace {

NdArray normal_init(Shape s, double sd, Rng& rng) {
  NdArray a(std::move(s));
  for (double& v : a.data) v = rng.normal(0.0, sd);
  return a;
}

Tensor mean_tokens(const Tensor& x) { return masked_mean_pool(x, nullptr); }

}  // namespace

// ---------------------------------------------------------------------------

TinyVit::TinyVit(const EncoderSpec& spec, Rng& rng)
    : embed_dim_(spec.embed_dim),
      width_(spec.width),
      patch_(spec.patch_size),
      grid_(spec.image_size / spec.patch_size),
      channels_(spec.channels) {
  spec.check();
  patch_proj_ = add_module("patch_embed", std::make_unique<Linear>(patch_dim(), width_, rng));
  pos_ = add_parameter("pos_embed", normal_init({num_patches(), width_}, 0.02, rng));
  blocks_ = add_module("blocks", std::make_unique<TransformerStack>(width_, spec.depth, spec.heads,
                                                                    2 * width_, rng));
  norm_ = add_module("norm", std::make_unique<LayerNorm>(width_));
  head_ = width_ == embed_dim_ ? nullptr
                               : add_module("head", std::make_unique<Linear>(width_, embed_dim_, rng));
}

Tensor TinyVit::patchify(const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != grid_ * patch_ || images.dim(2) != grid_ * patch_ ||
      images.dim(3) != channels_) {
    throw ShapeError("tiny_vit expects [B, " + std::to_string(grid_ * patch_) + ", " +
                     std::to_string(grid_ * patch_) + ", " + std::to_string(channels_) +
                     "], got " + shape_str(images.shape()));
  }
  const std::size_t b = images.dim(0), side = grid_ * patch_, P = num_patches(), pd = patch_dim();
  IndexMap idx = patch_cache_.get({b}, [&] {
    std::vector<std::int64_t> m(b * P * pd);
    std::size_t pos = 0;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t gy = 0; gy < grid_; ++gy)
        for (std::size_t gx = 0; gx < grid_; ++gx)
          for (std::size_t ky = 0; ky < patch_; ++ky)
            for (std::size_t kx = 0; kx < patch_; ++kx)
              for (std::size_t c = 0; c < channels_; ++c) {
                const std::size_t y = gy * patch_ + ky, x = gx * patch_ + kx;
                m[pos++] = static_cast<std::int64_t>(((n * side + y) * side + x) * channels_ + c);
              }
    return m;
  });
  return ops::gather(images, idx, {b, P, pd});
}

Tensor TinyVit::embed_patches(const Tensor& patches, std::span<const std::int64_t> pos) {
  const std::size_t b = patches.dim(0), n = patches.dim(1);
  Tensor tokens = patch_proj_->forward(patches);  // [B, n, width]
  Tensor pe;
  if (pos.size() == n) {
    pe = ops::select_rows(pos_, pos);  // [n, width], broadcast over B
  } else if (pos.size() == b * n) {
    pe = ops::reshape(ops::select_rows(pos_, pos), {b, n, width_});
  } else {
    throw ShapeError("embed_patches: position list does not match the token count");
  }
  return ops::add(tokens, pe);
}

Tensor TinyVit::encode_tokens(const Tensor& tokens) {
  return norm_->forward(blocks_->forward(tokens, nullptr));
}

Tensor TinyVit::forward(const EncoderInput& in) {
  if (in.dense == nullptr) throw ShapeError("tiny_vit needs dense image input");
  Tensor patches = patchify(*in.dense);
  std::vector<std::int64_t> pos(num_patches());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int64_t>(i);
  Tensor pooled = mean_tokens(encode_tokens(embed_patches(patches, pos)));
  return head_ ? head_->forward(pooled) : pooled;
}

// ---------------------------------------------------------------------------

SmallResNet::SmallResNet(const EncoderSpec& spec, Rng& rng) : embed_dim_(spec.embed_dim) {
  spec.check();
  const std::size_t w = spec.width;
  stem_ = add_module("stem", std::make_unique<Conv2d>(spec.channels, w, 3, 2, 1, rng));
  struct Stage {
    std::size_t in, out, stride;
  };
  const Stage stages[] = {{w, w, 1}, {w, 2 * w, 2}, {2 * w, 4 * w, 2}};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& s = stages[i];
    const std::string p = "layer" + std::to_string(i + 1);
    Block blk;
    blk.conv1 = add_module(p + "_conv1", std::make_unique<Conv2d>(s.in, s.out, 3, s.stride, 1, rng));
    blk.conv2 = add_module(p + "_conv2", std::make_unique<Conv2d>(s.out, s.out, 3, 1, 1, rng));
    blk.skip = (s.in != s.out || s.stride != 1)
                   ? add_module(p + "_skip", std::make_unique<Conv2d>(s.in, s.out, 1, s.stride, 0, rng))
                   : nullptr;
    blocks_.push_back(blk);
  }
  head_ = add_module("head", std::make_unique<Linear>(4 * w, embed_dim_, rng));
}

Tensor SmallResNet::forward(const EncoderInput& in) {
  if (in.dense == nullptr) throw ShapeError("small_resnet needs dense image input");
  Tensor h = ops::relu(stem_->forward(*in.dense));
  for (const auto& blk : blocks_) {
    Tensor y = blk.conv2->forward(ops::relu(blk.conv1->forward(h)));
    Tensor skip = blk.skip ? blk.skip->forward(h) : h;
    h = ops::relu(ops::add(y, skip));
  }
  const std::size_t b = h.dim(0), hw = h.dim(1) * h.dim(2), c = h.dim(3);
  return head_->forward(mean_tokens(ops::reshape(h, {b, hw, c})));
}

// ---------------------------------------------------------------------------

namespace {

NdArray sinusoid(std::size_t t, std::size_t d) {
  NdArray pe({t, d});
  for (std::size_t p = 0; p < t; ++p) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double a = static_cast<double>(p) * rate;
      pe.data[p * d + i] = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

}  // namespace

AudioEncoder::AudioEncoder(const EncoderSpec& spec, Rng& rng)
    : arch_(spec.arch), embed_dim_(spec.embed_dim), width_(spec.width), context_(nullptr) {
  spec.check();
  conv1_ = add_module("conv1", std::make_unique<Conv1d>(1, width_, spec.frame_kernel,
                                                        spec.frame_stride, rng));
  conv2_ = add_module("conv2", std::make_unique<Conv1d>(width_, width_, 3, 2, rng));
  proj_ = add_module("proj", std::make_unique<Linear>(width_, embed_dim_, rng));
  if (arch_ == "transformer_audio") {
    context_ = add_module("context", std::make_unique<TransformerStack>(
                                         embed_dim_, spec.depth, spec.heads, 2 * embed_dim_, rng));
  }
}

std::size_t AudioEncoder::frames_for(std::size_t samples) const {
  return conv2_->output_length(conv1_->output_length(samples));
}

AudioEncoder::Frames AudioEncoder::featurize(const Tensor& wave, const NdArray* mask) {
  if (wave.rank() != 2) throw ShapeError("audio encoder expects [B, T] waveforms");
  const std::size_t b = wave.dim(0), t = wave.dim(1);
  const std::size_t tf = frames_for(t);
  if (tf == 0) throw ShapeError("waveform too short for the audio frontend");
  Tensor h = ops::gelu(conv1_->forward(ops::reshape(wave, {b, t, 1})));
  h = ops::gelu(conv2_->forward(h));
  NdArray fm({b, tf}, 0.0);
  for (std::size_t n = 0; n < b; ++n) {
    std::size_t len = t;
    if (mask != nullptr) {
      len = 0;
      for (std::size_t i = 0; i < t; ++i) len += mask->data[n * t + i] > 0.5 ? 1 : 0;
    }
    const std::size_t valid = frames_for(len);
    if (valid == 0) throw ShapeError("waveform too short for the audio frontend");
    std::fill_n(fm.data.begin() + static_cast<std::ptrdiff_t>(n * tf), valid, 1.0);
  }
  return {h, std::move(fm)};
}

Tensor AudioEncoder::contextualize(const Tensor& frames, const NdArray& frame_mask) {
  Tensor c = proj_->forward(frames);
  if (context_ == nullptr) return c;
  const std::size_t t = frames.dim(1);
  c = ops::add(c, Tensor::constant(sinusoid(t, embed_dim_)));
  return context_->forward(c, &frame_mask);
}

Tensor AudioEncoder::forward(const EncoderInput& in) {
  if (in.dense == nullptr) throw ShapeError("audio encoder needs dense waveform input");
  Frames f = featurize(*in.dense, in.mask);
  return masked_mean_pool(contextualize(f.features, f.mask), &f.mask);
}

// ---------------------------------------------------------------------------

GraphEncoder::GraphEncoder(const EncoderSpec& spec, Rng& rng)
    : arch_(spec.arch), embed_dim_(spec.embed_dim), readout_(nullptr), head_(nullptr) {
  spec.check();
  std::size_t in = spec.in_features;
  for (std::size_t l = 0; l < spec.depth; ++l) {
    const std::string name = "layer" + std::to_string(l);
    if (arch_ == "gin") {
      gin_layers_.push_back(add_module(name, std::make_unique<Mlp>(in, spec.width, spec.width, rng)));
    } else {
      gcn_layers_.push_back(add_module(name, std::make_unique<Linear>(in, spec.width, rng)));
    }
    in = spec.width;
  }
  if (arch_ == "gin") {
    readout_ = add_module("readout", std::make_unique<Mlp>(spec.width, spec.width, embed_dim_, rng));
  } else {
    head_ = add_module("head", std::make_unique<Linear>(spec.width, embed_dim_, rng));
  }
}

Tensor GraphEncoder::forward(const EncoderInput& in) {
  if (in.graph == nullptr) throw ShapeError("graph encoder needs a graph batch");
  const GraphBatch& gb = *in.graph;
  const std::size_t n = gb.x.dim(0);
  Tensor h = Tensor::constant(gb.x);
  std::vector<std::int64_t> src, dst;
  for (std::size_t e = 0; e < gb.src.size(); ++e) {
    if (gb.src[e] == gb.dst[e]) continue;
    src.push_back(gb.src[e]);
    dst.push_back(gb.dst[e]);
    src.push_back(gb.dst[e]);
    dst.push_back(gb.src[e]);
  }
  if (arch_ == "gin") {
    for (std::size_t l = 0; l < gin_layers_.size(); ++l) {
      Tensor agg = ops::add(h, ops::scatter_add_rows(h, src, dst, {}, n));
      h = gin_layers_[l]->forward(agg);
      if (l + 1 < gin_layers_.size()) h = ops::relu(h);
    }
    std::vector<std::int64_t> nodes(n);
    for (std::size_t i = 0; i < n; ++i) nodes[i] = static_cast<std::int64_t>(i);
    Tensor pooled = ops::scatter_add_rows(h, nodes, gb.graph_id, {}, gb.num_graphs);
    return readout_->forward(pooled);
  }
  // GCN with self loops and symmetric degree normalisation.
  std::vector<double> deg(n, 1.0);
  for (auto d : dst) deg[static_cast<std::size_t>(d)] += 1.0;
  std::vector<std::int64_t> s2 = src, d2 = dst;
  for (std::size_t i = 0; i < n; ++i) {
    s2.push_back(static_cast<std::int64_t>(i));
    d2.push_back(static_cast<std::int64_t>(i));
  }
  std::vector<double> w(s2.size());
  for (std::size_t e = 0; e < s2.size(); ++e) {
    w[e] = 1.0 / std::sqrt(deg[static_cast<std::size_t>(s2[e])] * deg[static_cast<std::size_t>(d2[e])]);
  }
  for (std::size_t l = 0; l < gcn_layers_.size(); ++l) {
    h = ops::scatter_add_rows(gcn_layers_[l]->forward(h), s2, d2, w, n);
    if (l + 1 < gcn_layers_.size()) h = ops::relu(h);
  }
  std::vector<double> count(gb.num_graphs, 0.0);
  for (auto g : gb.graph_id) count[static_cast<std::size_t>(g)] += 1.0;
  std::vector<std::int64_t> nodes(n);
  std::vector<double> pw(n);
  for (std::size_t i = 0; i < n; ++i) {
    nodes[i] = static_cast<std::int64_t>(i);
    pw[i] = 1.0 / count[static_cast<std::size_t>(gb.graph_id[i])];
  }
  return head_->forward(ops::scatter_add_rows(h, nodes, gb.graph_id, pw, gb.num_graphs));
}

// ---------------------------------------------------------------------------

TextEncoder::TextEncoder(const EncoderSpec& spec, Rng& rng)
    : embed_dim_(spec.embed_dim), width_(spec.width), max_len_(spec.max_len) {
  spec.check();
  tokens_ = add_module("tokens", std::make_unique<Embedding>(spec.vocab_size, width_, rng));
  pos_ = add_parameter("pos_embed", normal_init({max_len_, width_}, 0.02, rng));
  blocks_ = add_module("blocks", std::make_unique<TransformerStack>(width_, spec.depth, spec.heads,
                                                                    2 * width_, rng));
  norm_ = add_module("norm", std::make_unique<LayerNorm>(width_));
  head_ = add_module("head", std::make_unique<Linear>(width_, embed_dim_, rng));
}

Tensor TextEncoder::forward(const EncoderInput& in) {
  if (in.dense == nullptr || in.dense->rank() != 2) throw ShapeError("text encoder expects [B, L] ids");
  const std::size_t l = in.dense->dim(1);
  if (l > max_len_) throw ShapeError("token sequence longer than max_len");
  Tensor h = ops::add(tokens_->forward(in.dense->array()), ops::slice_rows(pos_, 0, l));
  h = norm_->forward(blocks_->forward(h, in.mask));
  return head_->forward(masked_mean_pool(h, in.mask));
}

// ---------------------------------------------------------------------------

EncoderSpec default_spec(Modality m, std::size_t embed_dim, const DataShape* data) {
  EncoderSpec s;
  s.modality = m;
  s.embed_dim = embed_dim;
  switch (m) {
    case Modality::kVision:
      s.arch = "tiny_vit";
      s.width = 128;
      s.depth = 4;
      s.heads = 4;
      s.patch_size = 4;
      if (data) {
        s.image_size = data->image_size;
        s.channels = data->channels;
      }
      break;
    case Modality::kAudio:
      s.arch = "transformer_audio";
      s.width = 64;
      s.depth = 2;
      s.heads = 4;
      break;
    case Modality::kGraph:
      s.arch = "gin";
      s.width = 64;
      s.depth = 3;
      s.in_features = data ? data->node_features : 4;
      break;
    case Modality::kCrossmodal:
      throw UnsupportedModality("cross-modal methods build one encoder per pair member");
  }
  return s;
}

std::unique_ptr<Encoder> build_encoder(const EncoderSpec& spec, Rng& rng) {
  spec.check();
  if (spec.arch == "tiny_vit") return std::make_unique<TinyVit>(spec, rng);
  if (spec.arch == "small_resnet") return std::make_unique<SmallResNet>(spec, rng);
  if (spec.arch == "conv1d_audio" || spec.arch == "transformer_audio") {
    return std::make_unique<AudioEncoder>(spec, rng);
  }
  if (spec.arch == "gin" || spec.arch == "gcn") return std::make_unique<GraphEncoder>(spec, rng);
  return std::make_unique<TextEncoder>(spec, rng);
}

std::unique_ptr<Encoder> build_default(Modality m, std::size_t embed_dim, Rng& rng,
                                       const DataShape* data) {
  if (embed_dim == 0) throw std::invalid_argument("embed_dim must be > 0");
  return build_encoder(default_spec(m, embed_dim, data), rng);
}

namespace {

class UserEncoder : public Encoder {
 public:
  UserEncoder(std::unique_ptr<Module> m, UserForward fwd, Modality modality, std::size_t dim)
      : fwd_(std::move(fwd)), modality_(modality), dim_(dim) {
    module_ = add_module("module", std::move(m));
  }
  Tensor forward(const EncoderInput& in) override { return fwd_(*module_, in); }
  std::size_t embed_dim() const override { return dim_; }
  Modality modality() const override { return modality_; }
  std::string arch() const override { return "user"; }

 private:
  Module* module_;
  UserForward fwd_;
  Modality modality_;
  std::size_t dim_;
};

}  // namespace

std::unique_ptr<Encoder> adopt_user_encoder(std::unique_ptr<Module> module, UserForward forward,
                                            Modality modality, const EncoderInput& probe) {
  if (!module || !forward) throw std::invalid_argument("user encoder needs a module and a forward");
  Tensor out;
  {
    NoGradGuard ng;
    out = forward(*module, probe);
  }
  if (!out.defined() || out.rank() != 2) {
    throw ShapeProbeFailure(out.defined() ? out.rank() : 0, 2,
                            out.defined() ? "output " + shape_str(out.shape()) : "no output");
  }
  if (out.dim(0) != probe.batch_size()) {
    throw ShapeProbeFailure(2, 2, "leading dim " + std::to_string(out.dim(0)) +
                                      " differs from batch size " +
                                      std::to_string(probe.batch_size()));
  }
  const std::size_t dim = out.dim(1);
  return std::make_unique<UserEncoder>(std::move(module), std::move(forward), modality, dim);
}

void freeze(Encoder& enc) { freeze_parameters(enc); }

EncoderInput view_input(const Batch& b, std::size_t v, Tensor& holder) {
  EncoderInput in;
  if (b.modality == Modality::kGraph) {
    in.graph = &b.graph_views.at(v);
    return in;
  }
  if (b.modality == Modality::kCrossmodal) return pair_input(b, v == 1, holder);
  holder = Tensor::constant(b.views.at(v));
  in.dense = &holder;
  if (b.pad_mask) in.mask = &*b.pad_mask;
  return in;
}

EncoderInput pair_input(const Batch& b, bool second, Tensor& holder) {
  const auto& data = second ? b.pair_b : b.pair_a;
  const auto& mask = second ? b.pair_b_mask : b.pair_a_mask;
  if (!data) throw std::invalid_argument("batch has no cross-modal pair");
  EncoderInput in;
  holder = Tensor::constant(*data);
  in.dense = &holder;
  if (mask) in.mask = &*mask;
  return in;
}

}  // namespace sslkit
