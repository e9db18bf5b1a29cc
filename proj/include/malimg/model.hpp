#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "malimg/preprocess.hpp"
#include "malimg/real.hpp"
#include "malimg/rng.hpp"
#include "malimg/tensor.hpp"

namespace malimg {

enum class Padding { same, valid };
enum class Mode { train, eval };

struct ConvSpec {
    std::size_t filters = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    Padding padding = Padding::valid;

    friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Convolution plan of the reference architecture: three 3x3 same-padded
/// stride-1 convs (32, 64, 128) then six 5x5 valid stride-2 convs
/// (128, 128, 256, 256, 256, 256).
std::vector<ConvSpec> reference_conv_plan();

struct ModelConfig {
    std::size_t input_size = kImageSide;
    std::size_t families = 61;
    double dropout_rate = 0.2;
    double leaky_slope = 0.01;
    std::vector<ConvSpec> convs = reference_conv_plan();
    std::size_t embedding_channels = 256;
    std::size_t head_width = 128;
    std::size_t residual_blocks = 3;

    void validate() const;

    /// Spatial side before the first conv and after each conv.
    std::vector<std::size_t> spatial_chain() const;
    std::size_t embedding_side() const { return spatial_chain().back(); }
    std::size_t embedding_dim() const;

    /// 100x100 variant for desk-scale runs: the same-padding stage keeps
    /// three layers, the valid stage keeps the four stride-2 convs that fit
    /// (100 -> 48 -> 22 -> 9 -> 3), and every width is divided by eight.
    static ModelConfig desk_scale(std::size_t families = 5);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Output side of one conv: floor((n + 2*pad - k) / stride) + 1.
std::size_t conv_output_side(std::size_t n, const ConvSpec& spec);

// H x W x C embedding of one image, stored channel-fastest (HWC).
struct EmbeddingBlock {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<Real> values;
};

struct ClassProbs {
    std::vector<Real> probs;
};

// N images of side x side, row-major, one after another.
struct ImageBatch {
    std::size_t count = 0;
    std::size_t side = 0;
    std::vector<Real> pixels;

    static ImageBatch from_images(const std::vector<const GrayImage*>& images);
    Real* image(std::size_t i) { return pixels.data() + i * side * side; }
};

// N flattened embeddings (HWC order), row-major N x dim.
struct EmbeddingBatch {
    std::size_t count = 0;
    std::size_t dim = 0;
    std::vector<Real> values;

    const Real* row(std::size_t i) const { return values.data() + i * dim; }
};

// Activations retained by a training forward pass for backpropagation.
// Conv activations are laid out channel-major: C x N x H x W.
struct EncoderTrace {
    std::size_t count = 0;
    std::vector<std::vector<Real>> inputs;   // input of conv l (inputs[0] is the image batch)
    std::vector<std::vector<Real>> pre;      // pre-activation of conv l
    std::vector<std::vector<std::uint8_t>> keep;  // dropout keep flags of conv l, empty in eval mode
    std::vector<Real> last;                  // output of the final conv, input of the embedding layer
};

struct HeadTrace {
    std::size_t count = 0;
    std::vector<Real> embeddings;            // N x D
    std::vector<std::vector<Real>> hidden;   // hidden[i]: input of residual block i; back() feeds the output layer
    std::vector<std::vector<Real>> pre;
    std::vector<std::vector<std::uint8_t>> keep;
};

/// Fan-in scaled normal init, zero biases; deterministic in seed.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

EmbeddingBatch encoder_forward(const ModelConfig& config, const ModelParams& params, const ImageBatch& images,
                               Mode mode, Rng& rng, EncoderTrace* trace = nullptr);

/// Single-image convenience; shape-checks the image against config.input_size.
EmbeddingBlock encoder_forward(const ModelConfig& config, const ModelParams& params, const GrayImage& image,
                               Mode mode, Rng& rng);

/// Softmax probabilities, row-major N x families.
std::vector<Real> head_forward(const ModelConfig& config, const ModelParams& params,
                               const EmbeddingBatch& embeddings, Mode mode, Rng& rng, HeadTrace* trace = nullptr);

ClassProbs head_forward(const ModelConfig& config, const ModelParams& params, const EmbeddingBlock& embedding,
                        Mode mode, Rng& rng);

/// Accumulates parameter gradients into grads and returns dLoss/dEmbeddings.
EmbeddingBatch head_backward(const ModelConfig& config, const ModelParams& params, const HeadTrace& trace,
                             const std::vector<Real>& grad_logits, ModelParams& grads);

/// Accumulates parameter gradients of the encoder into grads.
void encoder_backward(const ModelConfig& config, const ModelParams& params, const EncoderTrace& trace,
                      const EmbeddingBatch& grad_embeddings, ModelParams& grads);

/// Index of the largest probability; ties go to the lowest index.
std::size_t argmax(const std::vector<Real>& probs);
std::size_t argmax(const Real* probs, std::size_t n);

std::size_t predict(const ModelConfig& config, const ModelParams& params, const GrayImage& image);

EmbeddingBlock to_block(const ModelConfig& config, const EmbeddingBatch& batch, std::size_t row);
EmbeddingBatch to_batch(const std::vector<EmbeddingBlock>& blocks);

}  // namespace malimg
