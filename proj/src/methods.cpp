#include "sslkit/methods.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace sslkit {

namespace {

constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kMaskTag = 0x3A5;

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& nt : named) out.push_back(nt.tensor);
  return out;
}

void ema_modules(Module& target, const Module& online, double m) {
  auto t = tensors_of(target.named_parameters());
  auto o = tensors_of(online.named_parameters());
  ema_update(t, std::vector<Tensor>(o.begin(), o.end()), m);
}

std::size_t embed_dim_param(const RunConfig& cfg) {
  return static_cast<std::size_t>(cfg.param_int("embed_dim"));
}

std::uint64_t seed_for(const Batch& b, std::size_t i, std::uint64_t tag) {
  const std::uint64_t base = i < b.sample_seeds.size() ? b.sample_seeds[i] : i;
  return derive_seed({base, tag});
}

std::vector<std::uint64_t> frame_seeds(const Batch& b) {
  std::vector<std::uint64_t> s(b.size);
  for (std::size_t i = 0; i < b.size; ++i) s[i] = seed_for(b, i, 0xD15);
  return s;
}

Tensor encode_view(Encoder& enc, const Batch& b, std::size_t v) {
  Tensor holder;
  return enc.forward(view_input(b, v, holder));
}

std::unique_ptr<Mlp> projector(std::size_t in, std::size_t out, Rng& rng) {
  return std::make_unique<Mlp>(in, 2 * in, out, rng);
}

std::unique_ptr<Mlp> predictor(std::size_t dim, Rng& rng) {
  return std::make_unique<Mlp>(dim, std::max<std::size_t>(dim / 4, 1), dim, rng);
}

/// Frozen copy of an encoder: same construction path and copied values.
std::unique_ptr<Encoder> clone_encoder(const RunConfig& cfg, const BuildContext& ctx,
                                       const Encoder& src) {
  Rng scratch(0);
  auto copy = make_encoder(cfg, ctx, scratch);
  copy_state(*copy, src);
  freeze_parameters(*copy);
  return copy;
}

// ---------------------------------------------------------------------------

class TwoViewContrastive : public MethodInstance {
 public:
  TwoViewContrastive(std::string key, Modality m, const RunConfig& cfg, const BuildContext& ctx)
      : key_(std::move(key)), modality_(m) {
    Rng rng(derive_seed({static_cast<std::uint64_t>(cfg.seed), kInitTag}));
    encoder_ = add_module("encoder", make_encoder(cfg, ctx, rng));
    head_ = add_module("projector",
                       projector(encoder_->embed_dim(),
                                 static_cast<std::size_t>(cfg.param_int("proj_dim")), rng));
    policy_ = policy_from_params(m, cfg, ctx.data, 2);
  }
  std::string key() const override { return key_; }
  Modality modality() const override { return modality_; }
  bool batch_coupled() const override { return true; }
  Encoder& encoder() override { return *encoder_; }

  std::vector<Tensor> features(const Batch& b) override {
    return {head_->forward(encode_view(*encoder_, b, 0)),
            head_->forward(encode_view(*encoder_, b, 1))};
  }

 protected:
  std::string key_;
  Modality modality_;
  Encoder* encoder_;
  Mlp* head_;
};

class SimClr : public TwoViewContrastive {
 public:
  SimClr(const RunConfig& cfg, const BuildContext& ctx, std::string key = "simclr",
         Modality m = Modality::kVision)
      : TwoViewContrastive(std::move(key), m, cfg, ctx), tau_(cfg.param_double("temperature")) {}
  LossOutput loss_from(std::span<const Tensor> f) override { return nt_xent(f[0], f[1], tau_); }

 private:
  double tau_;
};

class GraphCl : public SimClr {
 public:
  GraphCl(const RunConfig& cfg, const BuildContext& ctx)
      : SimClr(cfg, ctx, "graphcl", Modality::kGraph) {}
};

class BarlowTwins : public TwoViewContrastive {
 public:
  BarlowTwins(const RunConfig& cfg, const BuildContext& ctx)
      : TwoViewContrastive("barlow_twins", Modality::kVision, cfg, ctx),
        lambda_(cfg.param_double("lambda")) {}
  LossOutput loss_from(std::span<const Tensor> f) override {
    return barlow_twins(f[0], f[1], lambda_);
  }

 private:
  double lambda_;
};

// ---------------------------------------------------------------------------

class Byol : public MethodInstance {
 public:
  Byol(const RunConfig& cfg, const BuildContext& ctx) : momentum_(cfg.param_double("momentum")) {
    Rng rng(derive_seed({static_cast<std::uint64_t>(cfg.seed), kInitTag}));
    encoder_ = add_module("encoder", make_encoder(cfg, ctx, rng));
    const auto p = static_cast<std::size_t>(cfg.param_int("proj_dim"));
    projector_ = add_module("projector", projector(encoder_->embed_dim(), p, rng));
    predictor_ = add_module("predictor", predictor(p, rng));
    target_encoder_ = add_module("target_encoder", clone_encoder(cfg, ctx, *encoder_));
    target_projector_ = add_module("target_projector", projector(encoder_->embed_dim(), p, rng));
    copy_state(*target_projector_, *projector_);
    freeze_parameters(*target_projector_);
    policy_ = policy_from_params(Modality::kVision, cfg, ctx.data, 2);
  }
  std::string key() const override { return "byol"; }
  Modality modality() const override { return Modality::kVision; }
  bool batch_coupled() const override { return false; }
  Encoder& encoder() override { return *encoder_; }

  LossOutput compute_loss(const Batch& b) override {
    Tensor p1 = predictor_->forward(projector_->forward(encode_view(*encoder_, b, 0)));
    Tensor p2 = predictor_->forward(projector_->forward(encode_view(*encoder_, b, 1)));
    Tensor t1, t2;
    {
      NoGradGuard ng;
      t1 = target_projector_->forward(encode_view(*target_encoder_, b, 0));
      t2 = target_projector_->forward(encode_view(*target_encoder_, b, 1));
    }
    return byol_symmetric(p1, p2, t1, t2);
  }

  void post_step() override {
    ema_modules(*target_encoder_, *encoder_, momentum_);
    ema_modules(*target_projector_, *projector_, momentum_);
  }

 private:
  double momentum_;
  Encoder* encoder_;
  Mlp* projector_;
  Mlp* predictor_;
  Encoder* target_encoder_;
  Mlp* target_projector_;
};

class SimSiam : public MethodInstance {
 public:
  SimSiam(const RunConfig& cfg, const BuildContext& ctx) {
    Rng rng(derive_seed({static_cast<std::uint64_t>(cfg.seed), kInitTag}));
    encoder_ = add_module("encoder", make_encoder(cfg, ctx, rng));
    const auto p = static_cast<std::size_t>(cfg.param_int("proj_dim"));
    projector_ = add_module("projector", projector(encoder_->embed_dim(), p, rng));
    predictor_ = add_module("predictor", predictor(p, rng));
    policy_ = policy_from_params(Modality::kVision, cfg, ctx.data, 2);
  }
  std::string key() const override { return "simsiam"; }
  Modality modality() const override { return Modality::kVision; }
  bool batch_coupled() const override { return false; }
  Encoder& encoder() override { return *encoder_; }

  LossOutput compute_loss(const Batch& b) override {
    Tensor z1 = projector_->forward(encode_view(*encoder_, b, 0));
    Tensor z2 = projector_->forward(encode_view(*encoder_, b, 1));
    return simsiam_loss(predictor_->forward(z1), predictor_->forward(z2), z1, z2);
  }

 private:
  Encoder* encoder_;
  Mlp* projector_;
  Mlp* predictor_;
};

class MocoV2 : public MethodInstance {
 public:
  MocoV2(const RunConfig& cfg, const BuildContext& ctx)
      : momentum_(cfg.param_double("momentum")), tau_(cfg.param_double("temperature")) {
    Rng rng(derive_seed({static_cast<std::uint64_t>(cfg.seed), kInitTag}));
    encoder_ = add_module("encoder", make_encoder(cfg, ctx, rng));
    const auto p = static_cast<std::size_t>(cfg.param_int("proj_dim"));
    projector_ = add_module("projector", projector(encoder_->embed_dim(), p, rng));
    key_encoder_ = add_module("key_encoder", clone_encoder(cfg, ctx, *encoder_));
    key_projector_ = add_module("key_projector", projector(encoder_->embed_dim(), p, rng));
    copy_state(*key_projector_, *projector_);
    freeze_parameters(*key_projector_);
    const auto k = static_cast<std::size_t>(cfg.param_int("queue_size"));
    Tensor rows = add_buffer("queue.rows", NdArray({k, p}, 0.0));
    Tensor meta = add_buffer("queue.meta", NdArray({2}, 0.0));
    queue_ = std::make_unique<NegativeQueue>(rows, meta);
    // The queue starts full of random unit vectors.
    NdArray init({k, p});
    for (double& v : init.data) v = rng.normal();
    queue_->enqueue(init);
    policy_ = policy_from_params(Modality::kVision, cfg, ctx.data, 2);
  }
  std::string key() const override { return "moco_v2"; }
  Modality modality() const override { return Modality::kVision; }
  bool batch_coupled() const override { return false; }
  Encoder& encoder() override { return *encoder_; }
  NegativeQueue& queue() { return *queue_; }

  LossOutput compute_loss(const Batch& b) override {
    Tensor q = projector_->forward(encode_view(*encoder_, b, 0));
    Tensor k;
    {
      NoGradGuard ng;
      k = key_projector_->forward(encode_view(*key_encoder_, b, 1));
    }
    LossOutput out = moco_loss(q, k, *queue_, tau_);
    if (grad_enabled()) pending_.push_back(k.array());
    return out;
  }

  void post_step() override {
    ema_modules(*key_encoder_, *encoder_, momentum_);
    ema_modules(*key_projector_, *projector_, momentum_);
    for (const auto& keys : pending_) queue_->enqueue(keys);
    pending_.clear();
  }

 private:
  double momentum_, tau_;
  Encoder* encoder_;
  Mlp* projector_;
  Encoder* key_encoder_;
  Mlp* key_projector_;
  std::unique_ptr<NegativeQueue> queue_;
  std::vector<NdArray> pending_;
};

// ---------------------------------------------------------------------------

class Mae : public MethodInstance {
 public:
  Mae(const RunConfig& cfg, const BuildContext& ctx)
      : ratio_(cfg.param_double("mask_ratio")), norm_pix_(cfg.param_bool("norm_pix_loss")) {
    if (cfg.backbone == "user") throw std::invalid_argument("mae needs the built-in tiny_vit backbone");
    Rng rng(derive_seed({static_cast<std::uint64_t>(cfg.seed), kInitTag}));
    auto enc = make_encoder(cfg, ctx, rng);
    vit_ = dynamic_cast<TinyVit*>(enc.get());
    if (vit_ == nullptr) throw std::invalid_argument("mae needs a tiny_vit backbone");
    add_module("encoder", std::move(enc));
    const auto dw = static_cast<std::size_t>(cfg.param_int("decoder_width"));
    const auto heads = static_cast<std::size_t>(cfg.param_int("decoder_heads"));
    if (dw % heads != 0) throw std::invalid_argument("decoder_width must be divisible by decoder_heads");
    const std::size_t P = vit_->num_patches();
    decoder_embed_ = add_module("decoder_embed", std::make_unique<Linear>(vit_->width(), dw, rng));
    NdArray tok({dw});
    for (double& v : tok.data) v = 0.02 * rng.normal();
    mask_token_ = add_parameter("mask_token", std::move(tok));
    NdArray pos({P, dw});
    for (double& v : pos.data) v = 0.02 * rng.normal();
    decoder_pos_ = add_parameter("decoder_pos", std::move(pos));
    decoder_ = add_module("decoder", std::make_unique<TransformerStack>(
                                         dw, static_cast<std::size_t>(cfg.param_int("decoder_depth")),
                                         heads, 2 * dw, rng));
    decoder_norm_ = add_module("decoder_norm", std::make_unique<LayerNorm>(dw));
    decoder_pred_ = add_module("decoder_pred", std::make_unique<Linear>(dw, vit_->patch_dim(), rng));
    policy_ = AugmentationPolicy::identity(Modality::kVision, 1);
  }
  std::string key() const override { return "mae"; }
  Modality modality() const override { return Modality::kVision; }
  bool batch_coupled() const override { return false; }
  Encoder& encoder() override { return *vit_; }

  LossOutput compute_loss(const Batch& b) override {
    const std::size_t B = b.size, P = vit_->num_patches(), pd = vit_->patch_dim();
    Tensor images = Tensor::constant(b.views.at(0));
    Tensor patches = vit_->patchify(images);
    std::vector<std::uint8_t> masked(B * P, 0);
    std::size_t n_vis = 0;
    std::vector<std::int64_t> vis_pos;
    for (std::size_t i = 0; i < B; ++i) {
      Rng rng(seed_for(b, i, kMaskTag));
      for (std::size_t p : sample_patch_mask(P, ratio_, rng)) masked[i * P + p] = 1;
      std::size_t count = 0;
      for (std::size_t p = 0; p < P; ++p) {
        if (!masked[i * P + p]) {
          vis_pos.push_back(static_cast<std::int64_t>(p));
          ++count;
        }
      }
      n_vis = count;  // identical for every sample
    }
    // Visible patches [B, n_vis, pd] gathered from [B*P, pd].
    std::vector<std::int64_t> vis_rows(B * n_vis);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < n_vis; ++j)
        vis_rows[i * n_vis + j] = static_cast<std::int64_t>(i * P) + vis_pos[i * n_vis + j];
    Tensor visible =
        ops::reshape(ops::select_rows(ops::reshape(patches, {B * P, pd}), vis_rows), {B, n_vis, pd});
    Tensor latent = vit_->encode_tokens(vit_->embed_patches(visible, vis_pos));
    Tensor dec = ops::reshape(decoder_embed_->forward(latent), {B * n_vis, decoder_pos_.dim(1)});
    // Full sequence: encoded tokens at visible slots, the mask token elsewhere.
    const Tensor rows[] = {dec, ops::reshape(mask_token_, {1, mask_token_.dim(0)})};
    Tensor pool = ops::concat_rows(rows);
    std::vector<std::int64_t> order(B * P);
    for (std::size_t i = 0; i < B; ++i) {
      std::size_t slot = 0;
      for (std::size_t p = 0; p < P; ++p) {
        order[i * P + p] = masked[i * P + p] ? static_cast<std::int64_t>(B * n_vis)
                                             : static_cast<std::int64_t>(i * n_vis + slot++);
      }
    }
    Tensor seq = ops::reshape(ops::select_rows(pool, order), {B, P, decoder_pos_.dim(1)});
    seq = ops::add(seq, decoder_pos_);
    Tensor pred = decoder_pred_->forward(decoder_norm_->forward(decoder_->forward(seq, nullptr)));
    pred = ops::reshape(pred, {B, P, pd});
    return masked_patch_mse(pred, patches.array(), masked, norm_pix_);
  }

 private:
  double ratio_;
  bool norm_pix_;
  TinyVit* vit_;
  Linear* decoder_embed_;
  Tensor mask_token_;
  Tensor decoder_pos_;
  TransformerStack* decoder_;
  LayerNorm* decoder_norm_;
  Linear* decoder_pred_;
};

class Wav2Vec2 : public MethodInstance {
 public:
  Wav2Vec2(const RunConfig& cfg, const BuildContext& ctx)
      : ratio_(cfg.param_double("mask_ratio")),
        span_(static_cast<std::size_t>(cfg.param_int("span_length"))),
        tau_(cfg.param_double("temperature")),
        distractors_(static_cast<std::size_t>(cfg.param_int("n_distractors"))) {
    if (cfg.backbone == "user") throw std::invalid_argument("wav2vec2 needs a built-in audio backbone");
    Rng rng(derive_seed({static_cast<std::uint64_t>(cfg.seed), kInitTag}));
    auto enc = make_encoder(cfg, ctx, rng);
    audio_ = dynamic_cast<AudioEncoder*>(enc.get());
    if (audio_ == nullptr) throw std::invalid_argument("wav2vec2 needs an audio backbone");
    add_module("encoder", std::move(enc));
    auto target = clone_encoder(cfg, ctx, *audio_);
    target_ = dynamic_cast<AudioEncoder*>(target.get());
    add_module("target_featurizer", std::move(target));
    const std::size_t w = audio_->frame_width();
    NdArray emb({w});
    for (double& v : emb.data) v = rng.uniform(-1.0, 1.0) * 0.1;
    mask_emb_ = add_parameter("mask_emb", std::move(emb));
    final_proj_ = add_module("final_proj", std::make_unique<Linear>(audio_->embed_dim(), w, rng));
    policy_ = AugmentationPolicy::identity(Modality::kAudio, 1);
  }
  std::string key() const override { return "wav2vec2"; }
  Modality modality() const override { return Modality::kAudio; }
  bool batch_coupled() const override { return false; }
  Encoder& encoder() override { return *audio_; }

  LossOutput compute_loss(const Batch& b) override {
    Tensor wave = Tensor::constant(b.views.at(0));
    const NdArray* pad = b.pad_mask ? &*b.pad_mask : nullptr;
    AudioEncoder::Frames f = audio_->featurize(wave, pad);
    const std::size_t B = f.features.dim(0), T = f.features.dim(1), W = f.features.dim(2);
    NdArray mask({B, T}, 0.0);
    for (std::size_t i = 0; i < B; ++i) {
      std::size_t valid = 0;
      for (std::size_t t = 0; t < T; ++t) valid += f.mask.data[i * T + t] > 0.5 ? 1 : 0;
      Rng rng(seed_for(b, i, kMaskTag));
      const auto m = sample_span_mask(valid, span_, ratio_, rng);
      for (std::size_t t = 0; t < valid; ++t) mask.data[i * T + t] = m[t];
    }
    std::vector<double> keep(B * T * W), put(B * T * W);
    for (std::size_t r = 0; r < B * T; ++r) {
      std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(r * W), W, 1.0 - mask.data[r]);
      std::fill_n(put.begin() + static_cast<std::ptrdiff_t>(r * W), W, mask.data[r]);
    }
    Tensor x = ops::add(ops::mul(f.features, Tensor::constant({B, T, W}, std::move(keep))),
                        ops::mul(Tensor::constant({B, T, W}, std::move(put)), mask_emb_));
    Tensor context = final_proj_->forward(audio_->contextualize(x, f.mask));
    Tensor targets;
    {
      NoGradGuard ng;
      targets = target_->featurize(wave, pad).features;
    }
    const auto seeds = frame_seeds(b);
    return wav2vec2_lite_loss(context, targets, mask, &f.mask, tau_, distractors_, seeds);
  }

 private:
  double ratio_;
  std::size_t span_;
  double tau_;
  std::size_t distractors_;
  AudioEncoder* audio_;
  AudioEncoder* target_;
  Tensor mask_emb_;
  Linear* final_proj_;
};

// ---------------------------------------------------------------------------

class Clip : public MethodInstance {
 public:
  Clip(const RunConfig& cfg, const BuildContext& ctx)
      : tau_(cfg.param_double("temperature")), learnable_(cfg.param_bool("learnable_temperature")) {
    Rng rng(derive_seed({static_cast<std::uint64_t>(cfg.seed), kInitTag}));
    const std::size_t d = embed_dim_param(cfg);
    const auto width = static_cast<std::size_t>(cfg.param_int("backbone_width"));
    const auto depth = static_cast<std::size_t>(cfg.param_int("backbone_depth"));
    EncoderSpec a = default_spec(Modality::kVision, d, &ctx.data);
    if (const auto arch = cfg.param_string("backbone_arch"); arch == "small_resnet") {
      a.arch = arch;
      a.width = 16;
    }
    a.patch_size = static_cast<std::size_t>(cfg.param_int("patch_size"));
    a.heads = static_cast<std::size_t>(cfg.param_int("backbone_heads"));
    if (width) a.width = width;
    if (depth) a.depth = depth;
    if (cfg.backbone == "user") {
      if (!ctx.user_encoder) throw std::invalid_argument("backbone 'user' needs a user encoder factory");
      encoder_a_ = add_module("encoder_a", ctx.user_encoder());
    } else {
      encoder_a_ = add_module("encoder_a", build_encoder(a, rng));
    }
    EncoderSpec bspec;
    if (ctx.data.pair_b_kind == "tokens") {
      bspec.modality = Modality::kCrossmodal;
      bspec.arch = "text_transformer";
      bspec.embed_dim = d;
      bspec.width = width ? width : 64;
      bspec.depth = depth ? depth : 2;
      bspec.heads = a.heads;
      bspec.vocab_size = ctx.data.vocab_size;
    } else {
      bspec = default_spec(Modality::kAudio, d, &ctx.data);
      bspec.heads = a.heads;
      if (width) bspec.width = width;
      if (depth) bspec.depth = depth;
    }
    encoder_b_ = add_module("encoder_b", build_encoder(bspec, rng));
    if (learnable_) log_scale_ = add_parameter("logit_scale", NdArray({1}, std::log(1.0 / tau_)));
    policy_ = AugmentationPolicy::identity(Modality::kCrossmodal, 1);
  }
  std::string key() const override { return "clip"; }
  Modality modality() const override { return Modality::kCrossmodal; }
  bool batch_coupled() const override { return true; }
  Encoder& encoder() override { return *encoder_a_; }
  Encoder* pair_encoder() override { return encoder_b_; }

  std::vector<Tensor> features(const Batch& b) override {
    Tensor ha, hb;
    Tensor a = encoder_a_->forward(pair_input(b, false, ha));
    Tensor c = encoder_b_->forward(pair_input(b, true, hb));
    return {a, c};
  }
  LossOutput loss_from(std::span<const Tensor> f) override {
    return learnable_ ? clip_symmetric_loss(f[0], f[1], log_scale_)
                      : clip_symmetric_loss(f[0], f[1], tau_);
  }
  void post_step() override {
    if (!learnable_) return;
    auto v = log_scale_.mutable_values();
    v[0] = std::clamp(v[0], 0.0, std::log(100.0));
  }

 private:
  double tau_;
  bool learnable_;
  Encoder* encoder_a_;
  Encoder* encoder_b_;
  Tensor log_scale_;
};

// ---------------------------------------------------------------------------

template <class M>
MethodFactory factory_for() {
  return [](const RunConfig& cfg, const BuildContext& ctx) -> std::unique_ptr<MethodInstance> {
    return std::make_unique<M>(cfg, ctx);
  };
}

const std::vector<std::string> kVisionArchs = {"default", "tiny_vit", "small_resnet"};

}  // namespace

std::vector<Tensor> MethodInstance::features(const Batch&) {
  throw std::logic_error(key() + " does not expose gatherable features");
}

LossOutput MethodInstance::loss_from(std::span<const Tensor>) {
  throw std::logic_error(key() + " does not expose gatherable features");
}

LossOutput MethodInstance::compute_loss(const Batch& b) { return loss_from(features(b)); }

NdArray MethodInstance::embed(const Batch& b) {
  NoGradGuard ng;
  Tensor holder;
  EncoderInput in = b.modality == Modality::kCrossmodal ? pair_input(b, false, holder)
                                                        : view_input(b, 0, holder);
  return encoder().forward(in).array();
}

NdArray MethodInstance::embed_pair(const Batch& b) {
  Encoder* enc = pair_encoder();
  if (enc == nullptr) throw std::logic_error(key() + " has no second tower");
  NoGradGuard ng;
  Tensor holder;
  return enc->forward(pair_input(b, true, holder)).array();
}

void copy_state(Module& dst, const Module& src) {
  auto d = dst.named_state();
  auto s = src.named_state();
  std::map<std::string, Tensor> by_name;
  for (auto& nt : s) by_name.emplace(nt.name, nt.tensor);
  if (d.size() != s.size()) throw ShapeError("copy_state: modules have different state lists");
  for (auto& nt : d) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end() || it->second.shape() != nt.tensor.shape()) {
      throw ShapeError("copy_state: no matching source for '" + nt.name + "'");
    }
    auto out = nt.tensor.mutable_values();
    const auto in = it->second.values();
    std::copy(in.begin(), in.end(), out.begin());
  }
}

ConfigSchema common_method_schema(Modality m, std::vector<std::string> archs) {
  ConfigSchema s;
  s.add_enum("backbone_arch", "default", std::move(archs), "encoder architecture");
  s.add_int("embed_dim", 128, 1, 4096, "encoder output width");
  s.add_int("backbone_width", 0, 0, 4096, "hidden width; 0 keeps the architecture default");
  s.add_int("backbone_depth", 0, 0, 64, "layers; 0 keeps the architecture default");
  s.add_int("backbone_heads", 4, 1, 64, "attention heads");
  switch (m) {
    case Modality::kVision:
      s.add_int("patch_size", 4, 1, 64, "ViT patch side");
      s.add_float("crop_scale_min", 0.2, 0.0, 1.0, true, "smallest crop area fraction");
      s.add_float("flip_p", 0.5, 0.0, 1.0, false, "horizontal flip probability");
      s.add_float("jitter_p", 0.8, 0.0, 1.0, false, "colour jitter probability");
      s.add_float("jitter_strength", 0.4, 0.0, 1.0, false,
                  "brightness/contrast/saturation strength (hue is a quarter of it)");
      s.add_float("gray_p", 0.2, 0.0, 1.0, false, "grayscale probability");
      break;
    case Modality::kAudio:
      s.add_float("time_mask_max", 0.1, 0.0, 1.0, false, "largest masked fraction of a waveform");
      s.add_float("noise_p", 0.5, 0.0, 1.0, false, "additive noise probability");
      break;
    case Modality::kGraph:
      s.add_float("aug_ratio", 0.2, 0.0, 1.0, true, "fraction of nodes or edges touched");
      s.add_enum("aug_kinds", "all",
                 {"all", "node_drop", "edge_perturb", "attribute_mask", "subgraph"},
                 "graph transform pool");
      break;
    case Modality::kCrossmodal:
      s.add_int("patch_size", 4, 1, 64, "ViT patch side of the image tower");
      break;
  }
  return s;
}

AugmentationPolicy policy_from_params(Modality m, const RunConfig& cfg, const DataShape& data,
                                      std::size_t n_views) {
  AugmentationPolicy p;
  p.modality = m;
  p.n_views = n_views;
  switch (m) {
    case Modality::kVision: {
      p.vision.out_size = data.image_size;
      p.vision.scale_min = cfg.param_double("crop_scale_min");
      p.vision.flip_p = cfg.param_double("flip_p");
      p.vision.jitter_p = cfg.param_double("jitter_p");
      const double s = cfg.param_double("jitter_strength");
      p.vision.brightness = p.vision.contrast = p.vision.saturation = s;
      p.vision.hue = s / 4.0;
      p.vision.gray_p = cfg.param_double("gray_p");
      break;
    }
    case Modality::kAudio:
      p.audio.time_mask_max = cfg.param_double("time_mask_max");
      p.audio.noise_p = cfg.param_double("noise_p");
      break;
    case Modality::kGraph: {
      p.graph.ratio = cfg.param_double("aug_ratio");
      const std::string k = cfg.param_string("aug_kinds");
      if (k != "all") p.graph.kinds = {*parse_graph_aug(k)};
      break;
    }
    case Modality::kCrossmodal:
      p.enabled = false;
      break;
  }
  p.check();
  return p;
}

std::unique_ptr<Encoder> make_encoder(const RunConfig& cfg, const BuildContext& ctx, Rng& rng) {
  if (cfg.backbone == "user") {
    if (!ctx.user_encoder) throw std::invalid_argument("backbone 'user' needs a user encoder factory");
    auto enc = ctx.user_encoder();
    if (!enc) throw std::invalid_argument("user encoder factory returned nothing");
    return enc;
  }
  const Modality m = cfg.modality;
  EncoderSpec spec = default_spec(m, embed_dim_param(cfg), &ctx.data);
  const std::string arch = cfg.param_string("backbone_arch");
  if (arch != "default" && arch != spec.arch) {
    spec.arch = arch;
    if (arch == "small_resnet") spec.width = 16;
  }
  spec.heads = static_cast<std::size_t>(cfg.param_int("backbone_heads"));
  if (const auto w = cfg.param_int("backbone_width")) spec.width = static_cast<std::size_t>(w);
  if (const auto d = cfg.param_int("backbone_depth")) spec.depth = static_cast<std::size_t>(d);
  if (m == Modality::kVision) spec.patch_size = static_cast<std::size_t>(cfg.param_int("patch_size"));
  return build_encoder(spec, rng);
}

std::unique_ptr<MethodInstance> build_method(const RunConfig& cfg, const BuildContext& ctx,
                                             const Registry& registry) {
  const MethodSpec& spec = registry.lookup(cfg.method);
  return spec.factory(cfg, ctx);
}

void register_builtin_methods(Registry& r) {
  {
    ConfigSchema s = common_method_schema(Modality::kVision, kVisionArchs);
    s.add_float("temperature", 0.1, 0.0, {}, true, "NT-Xent temperature");
    s.add_int("proj_dim", 128, 1, 4096, "projection head output width");
    r.register_method({"simclr", Modality::kVision, s, factory_for<SimClr>(),
                       "Two-view contrastive learning with in-batch negatives"});
  }
  {
    ConfigSchema s = common_method_schema(Modality::kVision, kVisionArchs);
    s.add_float("momentum", 0.99, 0.0, 1.0, false, "target network EMA coefficient");
    s.add_int("proj_dim", 128, 1, 4096, "projection head output width");
    r.register_method({"byol", Modality::kVision, s, factory_for<Byol>(),
                       "Online network predicts an EMA target network"});
  }
  {
    ConfigSchema s = common_method_schema(Modality::kVision, kVisionArchs);
    s.add_int("proj_dim", 128, 1, 4096, "projection head output width");
    r.register_method({"simsiam", Modality::kVision, s, factory_for<SimSiam>(),
                       "Siamese prediction with a stop-gradient branch"});
  }
  {
    ConfigSchema s = common_method_schema(Modality::kVision, kVisionArchs);
    s.add_float("lambda", 5e-3, 0.0, {}, true, "off-diagonal weight");
    s.add_int("proj_dim", 128, 1, 4096, "projection head output width");
    r.register_method({"barlow_twins", Modality::kVision, s, factory_for<BarlowTwins>(),
                       "Cross-correlation matrix pushed towards the identity"});
  }
  {
    ConfigSchema s = common_method_schema(Modality::kVision, kVisionArchs);
    s.add_float("temperature", 0.07, 0.0, {}, true, "InfoNCE temperature");
    s.add_float("momentum", 0.99, 0.0, 1.0, false, "key encoder EMA coefficient");
    s.add_int("queue_size", 1024, 1, 1 << 20, "negative queue capacity");
    s.add_int("proj_dim", 128, 1, 4096, "projection head output width");
    r.register_method({"moco_v2", Modality::kVision, s, factory_for<MocoV2>(),
                       "Momentum key encoder with a FIFO queue of negatives"});
  }
  {
    ConfigSchema s = common_method_schema(Modality::kVision, {"default", "tiny_vit"});
    s.add_float("mask_ratio", 0.75, 0.0, 1.0, true, "fraction of patches hidden from the encoder");
    s.add_bool("norm_pix_loss", false, "standardise each target patch");
    s.add_int("decoder_width", 64, 1, 4096, "decoder token width");
    s.add_int("decoder_depth", 1, 1, 16, "decoder transformer blocks");
    s.add_int("decoder_heads", 4, 1, 64, "decoder attention heads");
    r.register_method({"mae", Modality::kVision, s, factory_for<Mae>(),
                       "Masked patch reconstruction from visible patches"});
  }
  {
    ConfigSchema s =
        common_method_schema(Modality::kAudio, {"default", "transformer_audio", "conv1d_audio"});
    s.add_float("mask_ratio", 0.5, 0.0, 1.0, true, "target fraction of masked frames");
    s.add_int("span_length", 4, 1, 1000, "frames per masked span");
    s.add_float("temperature", 0.1, 0.0, {}, true, "contrastive temperature");
    s.add_int("n_distractors", 10, 1, 1000, "negatives per masked frame");
    r.register_method({"wav2vec2", Modality::kAudio, s, factory_for<Wav2Vec2>(),
                       "Contrastive prediction of masked audio frames"});
  }
  {
    ConfigSchema s = common_method_schema(Modality::kGraph, {"default", "gin", "gcn"});
    s.add_float("temperature", 0.1, 0.0, {}, true, "NT-Xent temperature");
    s.add_int("proj_dim", 128, 1, 4096, "projection head output width");
    r.register_method({"graphcl", Modality::kGraph, s, factory_for<GraphCl>(),
                       "Contrastive learning over augmented graph pairs"});
  }
  {
    ConfigSchema s = common_method_schema(Modality::kCrossmodal, kVisionArchs);
    s.add_float("temperature", 0.07, 0.0, {}, true, "initial or fixed temperature");
    s.add_bool("learnable_temperature", true, "learn the logit scale");
    r.register_method({"clip", Modality::kCrossmodal, s, factory_for<Clip>(),
                       "Symmetric InfoNCE aligning paired modalities"});
  }
}

Registry& Registry::global() {
  static Registry* r = [] {
    auto* reg = new Registry();
    register_builtin_methods(*reg);
    return reg;
  }();
  return *r;
}

}  // namespace sslkit
