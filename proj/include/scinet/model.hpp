#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "scinet/layers.hpp"
#include "scinet/model_config.hpp"
#include "scinet/rf.hpp"

namespace scinet {

template <typename T>
using StageFeatures = std::array<BasicTensor<T>, 5>;

/// Five stages of ConvBnRelu blocks. The first block of each stage halves the
/// resolution, except stage 5 in DilatedR2 mode, which keeps the stage-4
/// resolution and dilates every block by 2.
template <typename T>
class Encoder {
 public:
  explicit Encoder(const ModelConfig& config);

  StageFeatures<T> forward(const BasicTensor<T>& image);
  /// `grads[s]` is the gradient reaching stage s's output from outside the
  /// encoder (empty = none). Returns the image gradient.
  BasicTensor<T> backward(StageFeatures<T> grads);

  std::vector<ConvBnRelu<T>*> units();
  std::vector<rf::LayerSpec> layer_specs() const;

 private:
  std::size_t in_channels_;
  std::array<std::vector<std::unique_ptr<ConvBnRelu<T>>>, 5> stages_;
};

/// Cascade of (1x1 reduce, dilated 3x3) branches. Branch i sees the stage-5
/// features concatenated with the outputs of branches 0..i-1; the final
/// concatenation of everything is projected by a 1x1 block.
template <typename T>
class DenseAspp {
 public:
  DenseAspp(std::size_t in_channels, const std::vector<int>& rates, std::size_t branch_channels,
            std::size_t out_channels);

  BasicTensor<T> forward(const BasicTensor<T>& features);
  BasicTensor<T> backward(const BasicTensor<T>& grad_out);

  std::vector<ConvBnRelu<T>*> units();
  /// Channels entering each branch's reduction, and of the pre-projection concat.
  std::vector<std::size_t> branch_input_channels() const;
  std::size_t concat_width() const { return in_channels_ + branch_channels_ * reduce_.size(); }

 private:
  std::size_t in_channels_, branch_channels_;
  std::vector<std::unique_ptr<ConvBnRelu<T>>> reduce_, dilated_;
  std::unique_ptr<ConvBnRelu<T>> project_;
};

/// Parallel pyramid: 1x1 branch, one dilated 3x3 branch per rate and an
/// image-pooling branch broadcast back to the input resolution, concatenated
/// and projected by a 1x1 block. The pooled branch has a biased conv and no
/// normalization, since its statistics would come from one value per image.
template <typename T>
class Aspp {
 public:
  Aspp(std::size_t in_channels, const std::vector<int>& rates, std::size_t branch_channels,
       std::size_t out_channels);

  BasicTensor<T> forward(const BasicTensor<T>& features);
  BasicTensor<T> backward(const BasicTensor<T>& grad_out);

  std::vector<ConvBnRelu<T>*> units();
  std::vector<ParamView<T>> parameters();
  void init(Rng& rng);
  Conv2d<T>& pool_conv() { return pool_conv_; }
  std::size_t concat_width() const { return branch_channels_ * (branches_.size() + 1); }

 private:
  std::size_t branch_channels_;
  std::vector<std::unique_ptr<ConvBnRelu<T>>> branches_;
  Conv2d<T> pool_conv_;
  std::unique_ptr<ConvBnRelu<T>> project_;
  BasicTensor<T> pooled_pre_activation_;
  Shape input_shape_;
};

/// [optional 2x upsample] -> concat skip -> two 3x3 blocks -> 2x upsample.
template <typename T>
class DecoderBlock {
 public:
  DecoderBlock(const std::string& name, std::size_t in_channels, std::size_t skip_channels, std::size_t out_channels,
               bool upsample_first);

  BasicTensor<T> forward(const BasicTensor<T>& running, const BasicTensor<T>& skip);
  /// Returns (grad running, grad skip).
  std::pair<BasicTensor<T>, BasicTensor<T>> backward(const BasicTensor<T>& grad_out);

  std::vector<ConvBnRelu<T>*> units() { return {&first_, &second_}; }
  bool upsamples_first() const { return upsample_first_; }

 private:
  std::string name_;
  bool upsample_first_;
  ConvBnRelu<T> first_, second_;
  std::size_t running_channels_ = 0, skip_channels_ = 0;
};

/// Shapes seen during the most recent forward pass.
struct ForwardTrace {
  std::array<Shape, 5> stages;
  Shape pyramid_concat;  // empty when there is no pyramid
  Shape pyramid_out;
  std::array<Shape, 4> decoder_concat;
  Shape output;
};

/// Encoder -> pyramid -> decoder -> 1x1 head -> sigmoid.
/// forward() returns per-pixel building probabilities (n, 1, h, w).
template <typename T>
class Model final : public Differentiable<T> {
 public:
  /// Builds and initializes weights deterministically from `seed`.
  Model(const ModelConfig& config, std::uint64_t seed);

  std::string name() const override { return "scinet"; }
  BasicTensor<T> forward(const BasicTensor<T>& image) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  std::vector<ParamView<T>> parameters() override;
  std::vector<ParamView<T>> buffers() override;

  /// The three stages of forward(), usable on their own.
  StageFeatures<T> encode(const BasicTensor<T>& image);
  BasicTensor<T> apply_pyramid(const BasicTensor<T>& stage5);
  BasicTensor<T> decode(const BasicTensor<T>& pyramid_out, const StageFeatures<T>& skips);

  void set_mode(Mode mode);
  /// Off for inference: no activations are kept for backward().
  void set_caching(bool enabled);

  const ModelConfig& config() const { return config_; }
  const ForwardTrace& trace() const { return trace_; }
  std::size_t parameter_count();
  /// Encoder layers (the path setting the output stride) for the analyzer.
  std::vector<rf::LayerSpec> encoder_layer_specs() const { return encoder_.layer_specs(); }

  DenseAspp<T>* dense_aspp() { return dense_.get(); }
  Aspp<T>* aspp() { return aspp_.get(); }

 private:
  std::vector<ConvBnRelu<T>*> units();

  ModelConfig config_;
  Encoder<T> encoder_;
  std::unique_ptr<DenseAspp<T>> dense_;
  std::unique_ptr<Aspp<T>> aspp_;
  std::vector<std::unique_ptr<DecoderBlock<T>>> decoder_;
  Conv2d<T> head_;
  BasicTensor<T> probabilities_;
  ForwardTrace trace_;
  Mode mode_ = Mode::Train;
  bool caching_ = true;
};

}  // namespace scinet
