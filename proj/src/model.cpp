#include "scinet/model.hpp"

#include "scinet/errors.hpp"

namespace scinet {

namespace {

template <typename T>
void add_into(BasicTensor<T>& acc, BasicTensor<T>&& g) {
  if (acc.empty()) {
    acc = std::move(g);
  } else {
    acc += g;
  }
}

template <typename T>
std::unique_ptr<ConvBnRelu<T>> make_unit(const std::string& name, std::size_t in, std::size_t out, ConvParams p) {
  return std::make_unique<ConvBnRelu<T>>(name, in, out, p);
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder

template <typename T>
Encoder<T>::Encoder(const ModelConfig& config) : in_channels_(config.in_channels) {
  std::size_t in = config.in_channels;
  for (std::size_t s = 0; s < 5; ++s) {
    const bool dilated = s == 4 && config.stage5 == Stage5Mode::DilatedR2;
    const std::size_t dilation = dilated ? 2 : 1;
    const std::size_t width = config.stage_widths[s];
    for (std::size_t b = 0; b < config.stage_blocks[s]; ++b) {
      const std::size_t stride = (b == 0 && !dilated) ? 2 : 1;
      const std::string name = "encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      stages_[s].push_back(make_unit<T>(name, b == 0 ? in : width, width, ConvParams::same(3, stride, dilation)));
    }
    in = width;
  }
}

template <typename T>
StageFeatures<T> Encoder<T>::forward(const BasicTensor<T>& image) {
  const Shape& s = image.shape();
  if (s.c != in_channels_)
    throw ShapeError("encoder expects " + std::to_string(in_channels_) + " input channels, got " + s.str());
  if (s.h == 0 || s.w == 0 || s.h % 32 != 0 || s.w % 32 != 0)
    throw ShapeError("encoder input height and width must be positive multiples of 32, got " + s.str());
  StageFeatures<T> out;
  const BasicTensor<T>* x = &image;
  for (std::size_t st = 0; st < 5; ++st) {
    BasicTensor<T> y = stages_[st].front()->forward(*x);
    for (std::size_t b = 1; b < stages_[st].size(); ++b) y = stages_[st][b]->forward(y);
    out[st] = std::move(y);
    x = &out[st];
  }
  return out;
}

template <typename T>
BasicTensor<T> Encoder<T>::backward(StageFeatures<T> grads) {
  BasicTensor<T> g;
  for (std::size_t st = 5; st-- > 0;) {
    if (!grads[st].empty()) add_into(g, std::move(grads[st]));
    if (g.empty()) throw ShapeError("encoder backward: no gradient reaches stage " + std::to_string(st + 1));
    for (std::size_t b = stages_[st].size(); b-- > 0;) g = stages_[st][b]->backward(g);
  }
  return g;
}

template <typename T>
std::vector<ConvBnRelu<T>*> Encoder<T>::units() {
  std::vector<ConvBnRelu<T>*> out;
  for (auto& stage : stages_)
    for (auto& u : stage) out.push_back(u.get());
  return out;
}

template <typename T>
std::vector<rf::LayerSpec> Encoder<T>::layer_specs() const {
  std::vector<rf::LayerSpec> out;
  for (const auto& stage : stages_) {
    for (const auto& u : stage) {
      const ConvParams& p = u->conv().params();
      out.push_back({u->name(), rf::LayerKind::Conv, static_cast<int>(p.kernel_h), static_cast<int>(p.stride_h),
                     static_cast<int>(p.dilation)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// DenseAspp

template <typename T>
DenseAspp<T>::DenseAspp(std::size_t in_channels, const std::vector<int>& rates, std::size_t branch_channels,
                        std::size_t out_channels)
    : in_channels_(in_channels), branch_channels_(branch_channels) {
  for (std::size_t i = 0; i < rates.size(); ++i) {
    const std::string name = "pyramid.branch" + std::to_string(i);
    reduce_.push_back(
        make_unit<T>(name + ".reduce", in_channels + i * branch_channels, branch_channels, ConvParams::same(1)));
    dilated_.push_back(make_unit<T>(name + ".dilated", branch_channels, branch_channels,
                                    ConvParams::same(3, 1, static_cast<std::size_t>(rates[i]))));
  }
  project_ = make_unit<T>("pyramid.project", concat_width(), out_channels, ConvParams::same(1));
}

template <typename T>
BasicTensor<T> DenseAspp<T>::forward(const BasicTensor<T>& features) {
  if (features.shape().c != in_channels_)
    throw ShapeError("dense pyramid expects " + std::to_string(in_channels_) + " channels, got " +
                     features.shape().str());
  std::vector<BasicTensor<T>> outputs;
  outputs.reserve(reduce_.size());
  std::vector<const BasicTensor<T>*> parts{&features};
  for (std::size_t i = 0; i < reduce_.size(); ++i) {
    BasicTensor<T> reduced = i == 0 ? reduce_[i]->forward(features) : reduce_[i]->forward(concat_channels(parts));
    outputs.push_back(dilated_[i]->forward(reduced));
    parts.push_back(&outputs.back());
  }
  return project_->forward(concat_channels(parts));
}

template <typename T>
BasicTensor<T> DenseAspp<T>::backward(const BasicTensor<T>& grad_out) {
  std::vector<std::size_t> widths{in_channels_};
  widths.resize(reduce_.size() + 1, branch_channels_);
  // grads[0] for the input features, grads[i + 1] for branch i's output
  auto grads = split_channels(project_->backward(grad_out), widths);
  for (std::size_t i = reduce_.size(); i-- > 0;) {
    auto g = reduce_[i]->backward(dilated_[i]->backward(grads[i + 1]));
    if (i == 0) {
      grads[0] += g;
      continue;
    }
    auto pieces = split_channels(g, std::vector<std::size_t>(widths.begin(), widths.begin() + i + 1));
    for (std::size_t k = 0; k <= i; ++k) grads[k] += pieces[k];
  }
  return std::move(grads[0]);
}

template <typename T>
std::vector<ConvBnRelu<T>*> DenseAspp<T>::units() {
  std::vector<ConvBnRelu<T>*> out;
  for (std::size_t i = 0; i < reduce_.size(); ++i) {
    out.push_back(reduce_[i].get());
    out.push_back(dilated_[i].get());
  }
  out.push_back(project_.get());
  return out;
}

template <typename T>
std::vector<std::size_t> DenseAspp<T>::branch_input_channels() const {
  std::vector<std::size_t> out;
  for (const auto& r : reduce_) out.push_back(r->conv().in_channels());
  return out;
}

// ---------------------------------------------------------------------------
// Aspp

template <typename T>
Aspp<T>::Aspp(std::size_t in_channels, const std::vector<int>& rates, std::size_t branch_channels,
              std::size_t out_channels)
    : branch_channels_(branch_channels),
      pool_conv_("pyramid.pool.conv", in_channels, branch_channels, ConvParams::same(1), true) {
  branches_.push_back(make_unit<T>("pyramid.branch0", in_channels, branch_channels, ConvParams::same(1)));
  for (std::size_t i = 0; i < rates.size(); ++i) {
    branches_.push_back(make_unit<T>("pyramid.branch" + std::to_string(i + 1), in_channels, branch_channels,
                                     ConvParams::same(3, 1, static_cast<std::size_t>(rates[i]))));
  }
  project_ = make_unit<T>("pyramid.project", concat_width(), out_channels, ConvParams::same(1));
}

template <typename T>
BasicTensor<T> Aspp<T>::forward(const BasicTensor<T>& features) {
  if (features.shape().c != pool_conv_.in_channels())
    throw ShapeError("pyramid expects " + std::to_string(pool_conv_.in_channels()) + " channels, got " +
                     features.shape().str());
  input_shape_ = features.shape();
  std::vector<BasicTensor<T>> outputs;
  outputs.reserve(branches_.size() + 1);
  for (auto& b : branches_) outputs.push_back(b->forward(features));
  auto pre = pool_conv_.forward(global_avg_pool(features));
  outputs.push_back(broadcast_spatial(relu(pre), input_shape_.h, input_shape_.w));
  pooled_pre_activation_ = std::move(pre);
  std::vector<const BasicTensor<T>*> parts;
  for (const auto& o : outputs) parts.push_back(&o);
  return project_->forward(concat_channels(parts));
}

template <typename T>
BasicTensor<T> Aspp<T>::backward(const BasicTensor<T>& grad_out) {
  auto grads = split_channels(project_->backward(grad_out),
                              std::vector<std::size_t>(branches_.size() + 1, branch_channels_));
  auto g_pooled = relu_backward(broadcast_spatial_backward(grads.back()), pooled_pre_activation_);
  BasicTensor<T> g = global_avg_pool_backward(pool_conv_.backward(g_pooled), input_shape_);
  for (std::size_t i = 0; i < branches_.size(); ++i) g += branches_[i]->backward(grads[i]);
  return g;
}

template <typename T>
std::vector<ConvBnRelu<T>*> Aspp<T>::units() {
  std::vector<ConvBnRelu<T>*> out;
  for (auto& b : branches_) out.push_back(b.get());
  out.push_back(project_.get());
  return out;
}

template <typename T>
std::vector<ParamView<T>> Aspp<T>::parameters() {
  std::vector<ParamView<T>> out;
  for (auto& b : branches_)
    for (auto& p : b->parameters()) out.push_back(p);
  for (auto& p : pool_conv_.parameters()) out.push_back(p);
  for (auto& p : project_->parameters()) out.push_back(p);
  return out;
}

template <typename T>
void Aspp<T>::init(Rng& rng) {
  for (auto& b : branches_) b->init(rng);
  pool_conv_.init(rng);
  project_->init(rng);
}

// ---------------------------------------------------------------------------
// DecoderBlock

template <typename T>
DecoderBlock<T>::DecoderBlock(const std::string& name, std::size_t in_channels, std::size_t skip_channels,
                              std::size_t out_channels, bool upsample_first)
    : name_(name),
      upsample_first_(upsample_first),
      first_(name + ".conv1", in_channels + skip_channels, out_channels, ConvParams::same(3)),
      second_(name + ".conv2", out_channels, out_channels, ConvParams::same(3)),
      running_channels_(in_channels),
      skip_channels_(skip_channels) {}

template <typename T>
BasicTensor<T> DecoderBlock<T>::forward(const BasicTensor<T>& running, const BasicTensor<T>& skip) {
  BasicTensor<T> up;
  const BasicTensor<T>* x = &running;
  if (upsample_first_) {
    up = upsample_bilinear_2x(running);
    x = &up;
  }
  const Shape& a = x->shape();
  const Shape& b = skip.shape();
  if (a.n != b.n || a.h != b.h || a.w != b.w)
    throw ShapeError(name_ + ": skip resolution " + b.str() + " does not match running features " + a.str());
  return upsample_bilinear_2x(second_.forward(first_.forward(concat_channels<T>({x, &skip}))));
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> DecoderBlock<T>::backward(const BasicTensor<T>& grad_out) {
  auto g = first_.backward(second_.backward(upsample_bilinear_2x_backward(grad_out)));
  auto parts = split_channels(g, {running_channels_, skip_channels_});
  if (upsample_first_) parts[0] = upsample_bilinear_2x_backward(parts[0]);
  return {std::move(parts[0]), std::move(parts[1])};
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed)
    : config_((config.validate(), config)),
      encoder_(config),
      head_("head", config.decoder_widths[3], config.head_channels, ConvParams::same(1), true) {
  const std::size_t pyramid_in = config.stage_widths[4];
  const std::size_t pyramid_out = config.pyramid_out_channels();
  if (config.pyramid == PyramidKind::DenseAspp) {
    dense_ = std::make_unique<DenseAspp<T>>(pyramid_in, config.rates, config.branch_channels, pyramid_out);
  } else if (config.pyramid == PyramidKind::Aspp) {
    aspp_ = std::make_unique<Aspp<T>>(pyramid_in, config.rates, config.branch_channels, pyramid_out);
  }
  // Skips are stages 4, 3, 2, 1. Only a strided stage 5 sits below stage 4's resolution.
  const std::array<std::size_t, 4> skip_width{config.stage_widths[3], config.stage_widths[2], config.stage_widths[1],
                                              config.stage_widths[0]};
  std::size_t in = pyramid_out;
  for (std::size_t i = 0; i < 4; ++i) {
    const bool upsample_first = i == 0 && config.stage5 == Stage5Mode::Strided;
    decoder_.push_back(std::make_unique<DecoderBlock<T>>("decoder.block" + std::to_string(i + 1), in, skip_width[i],
                                                         config.decoder_widths[i], upsample_first));
    in = config.decoder_widths[i];
  }

  Rng rng(seed);
  for (auto* u : encoder_.units()) u->init(rng);
  if (dense_) {
    for (auto* u : dense_->units()) u->init(rng);
  }
  if (aspp_) aspp_->init(rng);
  for (auto& block : decoder_)
    for (auto* u : block->units()) u->init(rng);
  head_.init(rng);
}

template <typename T>
StageFeatures<T> Model<T>::encode(const BasicTensor<T>& image) {
  auto stages = encoder_.forward(image);
  for (std::size_t s = 0; s < 5; ++s) trace_.stages[s] = stages[s].shape();
  return stages;
}

template <typename T>
BasicTensor<T> Model<T>::apply_pyramid(const BasicTensor<T>& stage5) {
  if (dense_) {
    auto out = dense_->forward(stage5);
    trace_.pyramid_concat = Shape{stage5.shape().n, dense_->concat_width(), stage5.shape().h, stage5.shape().w};
    trace_.pyramid_out = out.shape();
    return out;
  }
  if (aspp_) {
    auto out = aspp_->forward(stage5);
    trace_.pyramid_concat = Shape{stage5.shape().n, aspp_->concat_width(), stage5.shape().h, stage5.shape().w};
    trace_.pyramid_out = out.shape();
    return out;
  }
  trace_.pyramid_concat = Shape{};
  trace_.pyramid_out = stage5.shape();
  return stage5;
}

template <typename T>
BasicTensor<T> Model<T>::decode(const BasicTensor<T>& pyramid_out, const StageFeatures<T>& skips) {
  BasicTensor<T> x = pyramid_out;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& skip = skips[3 - i];
    x = decoder_[i]->forward(x, skip);
    trace_.decoder_concat[i] = Shape{skip.shape().n, decoder_[i]->units()[0]->conv().in_channels(), skip.shape().h,
                                     skip.shape().w};
  }
  probabilities_ = sigmoid(head_.forward(x));
  trace_.output = probabilities_.shape();
  return probabilities_;
}

template <typename T>
BasicTensor<T> Model<T>::forward(const BasicTensor<T>& image) {
  auto stages = encode(image);
  auto pyramid_out = apply_pyramid(stages[4]);
  auto out = decode(pyramid_out, stages);
  if (!caching_) probabilities_ = {};
  return out;
}

template <typename T>
BasicTensor<T> Model<T>::backward(const BasicTensor<T>& grad_out) {
  if (probabilities_.empty()) throw ShapeError("model backward() without a cached training forward()");
  BasicTensor<T> g = head_.backward(sigmoid_backward(grad_out, probabilities_));
  StageFeatures<T> stage_grads;
  for (std::size_t i = 4; i-- > 0;) {
    auto [g_running, g_skip] = decoder_[i]->backward(g);
    stage_grads[3 - i] = std::move(g_skip);
    g = std::move(g_running);
  }
  if (dense_) g = dense_->backward(g);
  if (aspp_) g = aspp_->backward(g);
  stage_grads[4] = std::move(g);
  return encoder_.backward(std::move(stage_grads));
}

template <typename T>
std::vector<ConvBnRelu<T>*> Model<T>::units() {
  auto out = encoder_.units();
  if (dense_)
    for (auto* u : dense_->units()) out.push_back(u);
  if (aspp_)
    for (auto* u : aspp_->units()) out.push_back(u);
  for (auto& block : decoder_)
    for (auto* u : block->units()) out.push_back(u);
  return out;
}

template <typename T>
std::vector<ParamView<T>> Model<T>::parameters() {
  std::vector<ParamView<T>> out;
  auto append = [&out](std::vector<ParamView<T>> ps) {
    for (auto& p : ps) out.push_back(std::move(p));
  };
  for (auto* u : encoder_.units()) append(u->parameters());
  if (dense_)
    for (auto* u : dense_->units()) append(u->parameters());
  if (aspp_) append(aspp_->parameters());
  for (auto& block : decoder_)
    for (auto* u : block->units()) append(u->parameters());
  append(head_.parameters());
  return out;
}

template <typename T>
std::vector<ParamView<T>> Model<T>::buffers() {
  std::vector<ParamView<T>> out;
  for (auto* u : units())
    for (auto& b : u->buffers()) out.push_back(std::move(b));
  return out;
}

template <typename T>
void Model<T>::set_mode(Mode mode) {
  mode_ = mode;
  for (auto* u : units()) u->set_mode(mode);
}

template <typename T>
void Model<T>::set_caching(bool enabled) {
  caching_ = enabled;
  for (auto* u : units()) u->set_caching(enabled);
  if (aspp_) aspp_->pool_conv().set_caching(enabled);
  head_.set_caching(enabled);
  if (!enabled) {
    head_.release();
    if (aspp_) aspp_->pool_conv().release();
    probabilities_ = {};
  }
}

template <typename T>
std::size_t Model<T>::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value.size();
  return n;
}

template class Encoder<float>;
template class Encoder<double>;
template class DenseAspp<float>;
template class DenseAspp<double>;
template class Aspp<float>;
template class Aspp<double>;
template class DecoderBlock<float>;
template class DecoderBlock<double>;
template class Model<float>;
template class Model<double>;

}  // namespace scinet
