#include "malimg/model.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "malimg/error.hpp"

namespace malimg {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>;

// Elements of an im2col buffer per chunk; small enough to stay in cache.
constexpr std::size_t kColumnBudget = std::size_t{1} << 17;

struct Slots {
    std::size_t convs;
    std::size_t blocks;

    std::size_t conv(std::size_t l) const { return 2 * l; }
    std::size_t embed() const { return 2 * convs; }
    std::size_t proj() const { return 2 * convs + 2; }
    std::size_t block(std::size_t i) const { return 2 * convs + 4 + 2 * i; }
    std::size_t out() const { return 2 * convs + 4 + 2 * blocks; }
};

Slots slots(const ModelConfig& c) { return {c.convs.size(), c.residual_blocks}; }

std::size_t padding_of(const ConvSpec& s) { return s.padding == Padding::same ? (s.kernel - 1) / 2 : 0; }

struct ConvGeom {
    std::size_t cin, cout, k, stride, pad, h, w, ho, wo, n;

    std::size_t rows() const { return cin * k * k; }
    std::size_t cols() const { return n * ho * wo; }
    std::size_t in_size() const { return cin * n * h * w; }
};

ConvGeom geometry(const ConvSpec& spec, std::size_t cin, std::size_t side, std::size_t n) {
    const std::size_t out = conv_output_side(side, spec);
    return {cin, spec.filters, spec.kernel, spec.stride, padding_of(spec), side, side, out, out, n};
}

// Column block for output rows [r0, r1), where output row r = sample * ho + oh.
// Input layout is C x N x H x W; the column buffer is (cin*k*k) x ((r1-r0)*wo).
void im2col(const Real* x, const ConvGeom& g, std::size_t r0, std::size_t r1, Real* col) {
    const std::size_t width = (r1 - r0) * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t kh = 0; kh < g.k; ++kh) {
            for (std::size_t kw = 0; kw < g.k; ++kw) {
                Real* dst = col + ((c * g.k + kh) * g.k + kw) * width;
                for (std::size_t r = r0; r < r1; ++r) {
                    const std::size_t sample = r / g.ho;
                    const std::size_t oh = r % g.ho;
                    Real* d = dst + (r - r0) * g.wo;
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(d, d + g.wo, Real(0));
                        continue;
                    }
                    const Real* src = x + ((c * g.n + sample) * g.h + static_cast<std::size_t>(ih)) * g.w;
                    for (std::size_t ow = 0; ow < g.wo; ++ow) {
                        const auto iw =
                            static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
                        d[ow] = (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) ? src[iw] : Real(0);
                    }
                }
            }
        }
    }
}

void col2im(const Real* col, const ConvGeom& g, std::size_t r0, std::size_t r1, Real* dx) {
    const std::size_t width = (r1 - r0) * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t kh = 0; kh < g.k; ++kh) {
            for (std::size_t kw = 0; kw < g.k; ++kw) {
                const Real* src = col + ((c * g.k + kh) * g.k + kw) * width;
                for (std::size_t r = r0; r < r1; ++r) {
                    const std::size_t sample = r / g.ho;
                    const std::size_t oh = r % g.ho;
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    const Real* s = src + (r - r0) * g.wo;
                    Real* d = dx + ((c * g.n + sample) * g.h + static_cast<std::size_t>(ih)) * g.w;
                    for (std::size_t ow = 0; ow < g.wo; ++ow) {
                        const auto iw =
                            static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) d[iw] += s[ow];
                    }
                }
            }
        }
    }
}

// Plain loops rather than Eigen reductions: those peel by pointer alignment,
// which made sums depend on where the allocator put a buffer.
void add_row_sums(const Real* m, std::size_t rows, std::size_t cols, Tensor& acc) {
    for (std::size_t r = 0; r < rows; ++r) {
        Real sum = 0;
        for (std::size_t c = 0; c < cols; ++c) sum += m[r * cols + c];
        acc.values[r] += sum;
    }
}

std::size_t chunk_rows(const ConvGeom& g) {
    return std::max<std::size_t>(1, kColumnBudget / std::max<std::size_t>(1, g.rows() * g.wo));
}

void conv_forward(const Real* x, const ConvGeom& g, const Tensor& weight, const Tensor& bias, Real* y,
                  std::vector<Real>& col) {
    const CMapMat w(weight.values.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.rows()));
    MapMat out(y, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.cols()));
    const std::size_t total_rows = g.n * g.ho;
    const std::size_t step = chunk_rows(g);
    for (std::size_t r0 = 0; r0 < total_rows; r0 += step) {
        const std::size_t r1 = std::min(total_rows, r0 + step);
        const std::size_t width = (r1 - r0) * g.wo;
        col.resize(g.rows() * width);
        im2col(x, g, r0, r1, col.data());
        const CMapMat c(col.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(width));
        out.middleCols(static_cast<Eigen::Index>(r0 * g.wo), static_cast<Eigen::Index>(width)).noalias() = w * c;
    }
    out.colwise() += CMapVec(bias.values.data(), static_cast<Eigen::Index>(g.cout));
}

// dx may be null (first layer); otherwise it must be zeroed by the caller.
void conv_backward(const Real* x, const ConvGeom& g, const Tensor& weight, const Real* dy, Tensor& dweight,
                   Tensor& dbias, Real* dx, std::vector<Real>& col) {
    const CMapMat w(weight.values.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.rows()));
    const CMapMat grad(dy, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.cols()));
    MapMat dw(dweight.values.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.rows()));
    add_row_sums(dy, g.cout, g.cols(), dbias);

    std::vector<Real> dcol;
    const std::size_t total_rows = g.n * g.ho;
    const std::size_t step = chunk_rows(g);
    for (std::size_t r0 = 0; r0 < total_rows; r0 += step) {
        const std::size_t r1 = std::min(total_rows, r0 + step);
        const std::size_t width = (r1 - r0) * g.wo;
        const auto block = grad.middleCols(static_cast<Eigen::Index>(r0 * g.wo), static_cast<Eigen::Index>(width));
        col.resize(g.rows() * width);
        im2col(x, g, r0, r1, col.data());
        const CMapMat c(col.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(width));
        dw.noalias() += block * c.transpose();
        if (dx != nullptr) {
            dcol.resize(g.rows() * width);
            MapMat dc(dcol.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(width));
            dc.noalias() = w.transpose() * block;
            col2im(dcol.data(), g, r0, r1, dx);
        }
    }
}

// Leaky ReLU followed by inverted dropout (train mode only). Keep flags are
// drawn at 16-bit resolution, four per generator draw.
void activate(const std::vector<Real>& z, std::vector<Real>& a, std::vector<std::uint8_t>* keep, Mode mode,
              double rate, double slope, Rng& rng) {
    a.resize(z.size());
    const Real s = static_cast<Real>(slope);
    const bool drop = mode == Mode::train && rate > 0.0;
    if (!drop) {
        for (std::size_t i = 0; i < z.size(); ++i) a[i] = z[i] > 0 ? z[i] : s * z[i];
        if (keep != nullptr) keep->clear();
        return;
    }
    const auto threshold = static_cast<std::uint64_t>(rate * 65536.0);
    const Real scale = static_cast<Real>(1.0 / (1.0 - rate));
    std::vector<std::uint8_t> local;
    std::vector<std::uint8_t>& flags = keep != nullptr ? *keep : local;
    flags.resize(z.size());
    const std::size_t n = z.size();
    for (std::size_t i = 0; i < n; i += 4) {
        const std::uint64_t bits = rng();
        const std::size_t m = std::min<std::size_t>(4, n - i);
        for (std::size_t j = 0; j < m; ++j) {
            const bool kept = ((bits >> (16 * j)) & 0xFFFF) >= threshold;
            const Real v = z[i + j];
            flags[i + j] = kept;
            a[i + j] = kept ? (v > 0 ? v : s * v) * scale : Real(0);
        }
    }
}

// Turns dLoss/dActivation into dLoss/dPreactivation in place.
void activation_backward(std::vector<Real>& grad, const std::vector<Real>& z, const std::vector<std::uint8_t>& keep,
                         double rate, double slope) {
    const Real s = static_cast<Real>(slope);
    const Real scale = keep.empty() ? Real(1) : static_cast<Real>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const Real d = z[i] > 0 ? Real(1) : s;
        const Real k = keep.empty() ? Real(1) : (keep[i] ? scale : Real(0));
        grad[i] *= d * k;
    }
}

// Y = X * W^T + b over row-major N x in -> N x out.
void dense_forward(const Real* x, std::size_t n, std::size_t in, const Tensor& w, const Tensor& b,
                   std::vector<Real>& y) {
    const std::size_t out = b.size();
    y.resize(n * out);
    const CMapMat xm(x, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in));
    const CMapMat wm(w.values.data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    MapMat ym(y.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out));
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += CMapVec(b.values.data(), static_cast<Eigen::Index>(out)).transpose();
}

// Accumulates dW, db and returns dX for Y = X * W^T + b.
std::vector<Real> dense_backward(const Real* x, std::size_t n, std::size_t in, const Tensor& w,
                                 const std::vector<Real>& dy, Tensor& dw, Tensor& db) {
    const std::size_t out = db.size();
    const CMapMat xm(x, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in));
    const CMapMat wm(w.values.data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    const CMapMat g(dy.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out));
    MapMat(dw.values.data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)).noalias() += g.transpose() * xm;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t o = 0; o < out; ++o) db.values[o] += dy[i * out + o];
    }
    std::vector<Real> dx(n * in);
    MapMat(dx.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in)).noalias() = g * wm;
    return dx;
}

void add_tensor(ModelParams& p, std::string name, std::vector<std::size_t> shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    if (stddev > 0.0) {
        std::normal_distribution<double> normal(0.0, stddev);
        for (auto& v : t.values) v = static_cast<Real>(normal(rng));
    }
    p.tensors.push_back({std::move(name), std::move(t)});
}

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
    throw Error(ErrorKind::BadConfig, "model." + key + ": " + why);
}

}  // namespace

std::vector<ConvSpec> reference_conv_plan() {
    return {
        {32, 3, 1, Padding::same},   {64, 3, 1, Padding::same},   {128, 3, 1, Padding::same},
        {128, 5, 2, Padding::valid}, {128, 5, 2, Padding::valid}, {256, 5, 2, Padding::valid},
        {256, 5, 2, Padding::valid}, {256, 5, 2, Padding::valid}, {256, 5, 2, Padding::valid},
    };
}

std::size_t conv_output_side(std::size_t n, const ConvSpec& spec) {
    const std::size_t padded = n + 2 * padding_of(spec);
    if (spec.stride == 0 || spec.kernel == 0 || padded < spec.kernel) return 0;
    return (padded - spec.kernel) / spec.stride + 1;
}

void ModelConfig::validate() const {
    if (input_size == 0) bad_key("input_size", "must be positive");
    if (families < 2) bad_key("families", "need at least 2 families");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) bad_key("dropout_rate", "must lie in [0, 1)");
    if (!(leaky_slope >= 0.0)) bad_key("leaky_slope", "must be nonnegative");
    if (convs.empty()) bad_key("convs", "need at least one convolution");
    if (embedding_channels == 0) bad_key("embedding_channels", "must be positive");
    if (head_width == 0) bad_key("head_width", "must be positive");
    std::size_t side = input_size;
    for (std::size_t l = 0; l < convs.size(); ++l) {
        const auto& c = convs[l];
        const std::string key = "convs[" + std::to_string(l) + "]";
        if (c.filters == 0 || c.kernel == 0 || c.stride == 0) bad_key(key, "filters, kernel and stride must be positive");
        if (c.padding == Padding::same && c.kernel % 2 == 0) bad_key(key, "same padding needs an odd kernel");
        side = conv_output_side(side, c);
        if (side == 0) bad_key(key, "spatial size collapses below 1 for input_size " + std::to_string(input_size));
    }
}

std::vector<std::size_t> ModelConfig::spatial_chain() const {
    std::vector<std::size_t> chain{input_size};
    for (const auto& c : convs) chain.push_back(conv_output_side(chain.back(), c));
    return chain;
}

std::size_t ModelConfig::embedding_dim() const {
    const std::size_t side = embedding_side();
    return side * side * embedding_channels;
}

ModelConfig ModelConfig::desk_scale(std::size_t families) {
    ModelConfig c;
    c.input_size = 100;
    c.families = families;
    c.convs = {
        {4, 3, 1, Padding::same},   {8, 3, 1, Padding::same},   {16, 3, 1, Padding::same},
        {16, 5, 2, Padding::valid}, {16, 5, 2, Padding::valid}, {32, 5, 2, Padding::valid},
        {32, 5, 2, Padding::valid},
    };
    c.embedding_channels = 32;
    c.head_width = 16;
    return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    auto convs = nlohmann::json::array();
    for (const auto& s : c.convs) {
        convs.push_back({{"filters", s.filters},
                         {"kernel", s.kernel},
                         {"stride", s.stride},
                         {"padding", s.padding == Padding::same ? "same" : "valid"}});
    }
    j = nlohmann::json{{"input_size", c.input_size},
                       {"families", c.families},
                       {"dropout_rate", c.dropout_rate},
                       {"leaky_slope", c.leaky_slope},
                       {"convs", convs},
                       {"embedding_channels", c.embedding_channels},
                       {"head_width", c.head_width},
                       {"residual_blocks", c.residual_blocks}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    if (!j.is_object()) bad_key("", "expected an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "input_size") c.input_size = value.get<std::size_t>();
            else if (key == "families") c.families = value.get<std::size_t>();
            else if (key == "dropout_rate") c.dropout_rate = value.get<double>();
            else if (key == "leaky_slope") c.leaky_slope = value.get<double>();
            else if (key == "embedding_channels") c.embedding_channels = value.get<std::size_t>();
            else if (key == "head_width") c.head_width = value.get<std::size_t>();
            else if (key == "residual_blocks") c.residual_blocks = value.get<std::size_t>();
            else if (key == "convs") {
                c.convs.clear();
                for (const auto& s : value) {
                    ConvSpec spec;
                    spec.filters = s.at("filters").get<std::size_t>();
                    spec.kernel = s.at("kernel").get<std::size_t>();
                    spec.stride = s.at("stride").get<std::size_t>();
                    const auto pad = s.at("padding").get<std::string>();
                    if (pad != "same" && pad != "valid") bad_key("convs", "padding must be 'same' or 'valid'");
                    spec.padding = pad == "same" ? Padding::same : Padding::valid;
                    c.convs.push_back(spec);
                }
            } else {
                bad_key(key, "unknown key");
            }
        } catch (const nlohmann::json::exception& e) {
            bad_key(key, e.what());
        }
    }
}

ImageBatch ImageBatch::from_images(const std::vector<const GrayImage*>& images) {
    ImageBatch batch;
    batch.count = images.size();
    batch.side = images.empty() ? 0 : images.front()->height;
    batch.pixels.resize(batch.count * batch.side * batch.side);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& img = *images[i];
        if (img.height != batch.side || img.width != batch.side) {
            throw Error(ErrorKind::ShapeMismatch, "image " + std::to_string(i) + " is " + std::to_string(img.height) +
                                                      "x" + std::to_string(img.width) + ", batch expects " +
                                                      std::to_string(batch.side));
        }
        std::copy(img.pixels.begin(), img.pixels.end(), batch.image(i));
    }
    return batch;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p;
    p.role = Role::student;
    std::size_t cin = 1;
    std::size_t tensor_index = 0;
    const auto next_rng = [&] { return derive_rng(seed, tensor_index++, Stream::Init); };
    const double gain = 2.0 / (1.0 + config.leaky_slope * config.leaky_slope);

    for (std::size_t l = 0; l < config.convs.size(); ++l) {
        const auto& c = config.convs[l];
        const std::size_t fan_in = cin * c.kernel * c.kernel;
        Rng rng = next_rng();
        add_tensor(p, "conv" + std::to_string(l) + ".weight", {c.filters, cin, c.kernel, c.kernel},
                   std::sqrt(gain / static_cast<double>(fan_in)), rng);
        add_tensor(p, "conv" + std::to_string(l) + ".bias", {c.filters}, 0.0, rng);
        cin = c.filters;
    }
    {
        Rng rng = next_rng();
        add_tensor(p, "embed.weight", {config.embedding_channels, cin}, std::sqrt(1.0 / static_cast<double>(cin)), rng);
        add_tensor(p, "embed.bias", {config.embedding_channels}, 0.0, rng);
    }
    const std::size_t dim = config.embedding_dim();
    const std::size_t width = config.head_width;
    {
        Rng rng = next_rng();
        add_tensor(p, "proj.weight", {width, dim}, std::sqrt(1.0 / static_cast<double>(dim)), rng);
        add_tensor(p, "proj.bias", {width}, 0.0, rng);
    }
    for (std::size_t i = 0; i < config.residual_blocks; ++i) {
        Rng rng = next_rng();
        add_tensor(p, "res" + std::to_string(i) + ".weight", {width, width}, std::sqrt(1.0 / static_cast<double>(width)),
                   rng);
        add_tensor(p, "res" + std::to_string(i) + ".bias", {width}, 0.0, rng);
    }
    {
        Rng rng = next_rng();
        add_tensor(p, "out.weight", {config.families, width}, std::sqrt(1.0 / static_cast<double>(width)), rng);
        add_tensor(p, "out.bias", {config.families}, 0.0, rng);
    }
    return p;
}

EmbeddingBatch encoder_forward(const ModelConfig& config, const ModelParams& params, const ImageBatch& images,
                               Mode mode, Rng& rng, EncoderTrace* trace) {
    if (images.count == 0) throw Error(ErrorKind::ShapeMismatch, "empty image batch");
    if (images.side != config.input_size) {
        throw Error(ErrorKind::ShapeMismatch, "input side " + std::to_string(images.side) + " != configured " +
                                                  std::to_string(config.input_size));
    }
    const Slots slot = slots(config);
    const std::size_t n = images.count;
    if (trace != nullptr) {
        *trace = EncoderTrace{};
        trace->count = n;
    }

    std::vector<Real> x = images.pixels;
    std::vector<Real> col;
    std::size_t cin = 1;
    std::size_t side = config.input_size;
    for (std::size_t l = 0; l < config.convs.size(); ++l) {
        const ConvGeom g = geometry(config.convs[l], cin, side, n);
        std::vector<Real> z(g.cout * g.cols());
        conv_forward(x.data(), g, params[slot.conv(l)], params[slot.conv(l) + 1], z.data(), col);
        std::vector<Real> a;
        std::vector<std::uint8_t> keep;
        activate(z, a, &keep, mode, config.dropout_rate, config.leaky_slope, rng);
        if (trace != nullptr) {
            trace->inputs.push_back(std::move(x));
            trace->pre.push_back(std::move(z));
            trace->keep.push_back(std::move(keep));
        }
        x = std::move(a);
        cin = g.cout;
        side = g.ho;
    }

    // Pointwise linear embedding layer: C_emb x (N * side * side).
    const std::size_t area = side * side;
    const std::size_t cols = n * area;
    const std::size_t channels = config.embedding_channels;
    std::vector<Real> z(channels * cols);
    {
        const Tensor& w = params[slot.embed()];
        const CMapMat wm(w.values.data(), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(cin));
        const CMapMat xm(x.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(cols));
        MapMat zm(z.data(), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(cols));
        zm.noalias() = wm * xm;
        zm.colwise() += CMapVec(params[slot.embed() + 1].values.data(), static_cast<Eigen::Index>(channels));
    }
    if (trace != nullptr) trace->last = std::move(x);

    EmbeddingBatch out{n, area * channels, std::vector<Real>(n * area * channels)};
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t p = 0; p < area; ++p) out.values[s * out.dim + p * channels + c] = z[c * cols + s * area + p];
        }
    }
    return out;
}

void encoder_backward(const ModelConfig& config, const ModelParams& params, const EncoderTrace& trace,
                      const EmbeddingBatch& grad_embeddings, ModelParams& grads) {
    const Slots slot = slots(config);
    const std::size_t n = trace.count;
    const auto chain = config.spatial_chain();
    const std::size_t side = chain.back();
    const std::size_t area = side * side;
    const std::size_t cols = n * area;
    const std::size_t channels = config.embedding_channels;
    const std::size_t cin = config.convs.back().filters;
    if (grad_embeddings.count != n || grad_embeddings.dim != area * channels) {
        throw Error(ErrorKind::ShapeMismatch, "embedding gradient does not match the traced batch");
    }

    std::vector<Real> dz(channels * cols);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t p = 0; p < area; ++p) {
                dz[c * cols + s * area + p] = grad_embeddings.values[s * grad_embeddings.dim + p * channels + c];
            }
        }
    }

    std::vector<Real> dx(cin * cols);
    {
        const CMapMat g(dz.data(), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(cols));
        const CMapMat xm(trace.last.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(cols));
        const CMapMat wm(params[slot.embed()].values.data(), static_cast<Eigen::Index>(channels),
                         static_cast<Eigen::Index>(cin));
        MapMat(grads[slot.embed()].values.data(), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(cin))
            .noalias() += g * xm.transpose();
        add_row_sums(dz.data(), channels, cols, grads[slot.embed() + 1]);
        MapMat(dx.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(cols)).noalias() = wm.transpose() * g;
    }

    std::vector<Real> col;
    for (std::size_t l = config.convs.size(); l-- > 0;) {
        const std::size_t layer_cin = l == 0 ? 1 : config.convs[l - 1].filters;
        const ConvGeom g = geometry(config.convs[l], layer_cin, chain[l], n);
        activation_backward(dx, trace.pre[l], trace.keep[l], config.dropout_rate, config.leaky_slope);
        std::vector<Real> dprev;
        if (l > 0) dprev.assign(g.in_size(), Real(0));
        conv_backward(trace.inputs[l].data(), g, params[slot.conv(l)], dx.data(), grads[slot.conv(l)],
                      grads[slot.conv(l) + 1], l > 0 ? dprev.data() : nullptr, col);
        dx = std::move(dprev);
    }
}

std::vector<Real> head_forward(const ModelConfig& config, const ModelParams& params,
                               const EmbeddingBatch& embeddings, Mode mode, Rng& rng, HeadTrace* trace) {
    if (embeddings.dim != config.embedding_dim() || embeddings.values.size() != embeddings.count * embeddings.dim) {
        throw Error(ErrorKind::ShapeMismatch, "embedding width " + std::to_string(embeddings.dim) + " != configured " +
                                                  std::to_string(config.embedding_dim()));
    }
    const Slots slot = slots(config);
    const std::size_t n = embeddings.count;
    const std::size_t width = config.head_width;

    std::vector<Real> h;
    dense_forward(embeddings.values.data(), n, embeddings.dim, params[slot.proj()], params[slot.proj() + 1], h);
    if (trace != nullptr) {
        *trace = HeadTrace{};
        trace->count = n;
        trace->embeddings = embeddings.values;
    }
    for (std::size_t i = 0; i < config.residual_blocks; ++i) {
        std::vector<Real> z;
        dense_forward(h.data(), n, width, params[slot.block(i)], params[slot.block(i) + 1], z);
        std::vector<Real> a;
        std::vector<std::uint8_t> keep;
        activate(z, a, &keep, mode, config.dropout_rate, config.leaky_slope, rng);
        std::vector<Real> next(h);
        for (std::size_t k = 0; k < next.size(); ++k) next[k] += a[k];
        if (trace != nullptr) {
            trace->hidden.push_back(std::move(h));
            trace->pre.push_back(std::move(z));
            trace->keep.push_back(std::move(keep));
        }
        h = std::move(next);
    }
    std::vector<Real> logits;
    dense_forward(h.data(), n, width, params[slot.out()], params[slot.out() + 1], logits);
    if (trace != nullptr) trace->hidden.push_back(std::move(h));

    const std::size_t f = config.families;
    std::vector<Real> probs(n * f);
    for (std::size_t s = 0; s < n; ++s) {
        const Real* l = logits.data() + s * f;
        const double top = *std::max_element(l, l + f);
        double sum = 0.0;
        for (std::size_t k = 0; k < f; ++k) sum += std::exp(static_cast<double>(l[k]) - top);
        for (std::size_t k = 0; k < f; ++k) {
            probs[s * f + k] = static_cast<Real>(std::exp(static_cast<double>(l[k]) - top) / sum);
        }
    }
    return probs;
}

EmbeddingBatch head_backward(const ModelConfig& config, const ModelParams& params, const HeadTrace& trace,
                             const std::vector<Real>& grad_logits, ModelParams& grads) {
    const Slots slot = slots(config);
    const std::size_t n = trace.count;
    const std::size_t width = config.head_width;
    const std::size_t dim = config.embedding_dim();
    if (grad_logits.size() != n * config.families) {
        throw Error(ErrorKind::ShapeMismatch, "logit gradient does not match the traced batch");
    }

    std::vector<Real> dh = dense_backward(trace.hidden.back().data(), n, width, params[slot.out()], grad_logits,
                                          grads[slot.out()], grads[slot.out() + 1]);
    for (std::size_t i = config.residual_blocks; i-- > 0;) {
        std::vector<Real> dz = dh;
        activation_backward(dz, trace.pre[i], trace.keep[i], config.dropout_rate, config.leaky_slope);
        const auto dskip = dense_backward(trace.hidden[i].data(), n, width, params[slot.block(i)], dz,
                                          grads[slot.block(i)], grads[slot.block(i) + 1]);
        for (std::size_t k = 0; k < dh.size(); ++k) dh[k] += dskip[k];
    }
    EmbeddingBatch out{n, dim, {}};
    out.values = dense_backward(trace.embeddings.data(), n, dim, params[slot.proj()], dh, grads[slot.proj()],
                                grads[slot.proj() + 1]);
    return out;
}

EmbeddingBlock encoder_forward(const ModelConfig& config, const ModelParams& params, const GrayImage& image,
                               Mode mode, Rng& rng) {
    if (image.height != config.input_size || image.width != config.input_size) {
        throw Error(ErrorKind::ShapeMismatch, "image is " + std::to_string(image.height) + "x" +
                                                  std::to_string(image.width) + ", model expects " +
                                                  std::to_string(config.input_size));
    }
    const auto batch = encoder_forward(config, params, ImageBatch::from_images({&image}), mode, rng);
    return to_block(config, batch, 0);
}

ClassProbs head_forward(const ModelConfig& config, const ModelParams& params, const EmbeddingBlock& embedding,
                        Mode mode, Rng& rng) {
    const std::size_t side = config.embedding_side();
    if (embedding.height != side || embedding.width != side || embedding.channels != config.embedding_channels ||
        embedding.values.size() != config.embedding_dim()) {
        throw Error(ErrorKind::ShapeMismatch, "embedding block shape does not match the model");
    }
    return {head_forward(config, params, to_batch({embedding}), mode, rng)};
}

std::size_t argmax(const Real* probs, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i) {
        if (probs[i] > probs[best]) best = i;
    }
    return best;
}

std::size_t argmax(const std::vector<Real>& probs) { return argmax(probs.data(), probs.size()); }

std::size_t predict(const ModelConfig& config, const ModelParams& params, const GrayImage& image) {
    Rng unused(0);
    const auto embedding = encoder_forward(config, params, image, Mode::eval, unused);
    return argmax(head_forward(config, params, embedding, Mode::eval, unused).probs);
}

EmbeddingBlock to_block(const ModelConfig& config, const EmbeddingBatch& batch, std::size_t row) {
    const std::size_t side = config.embedding_side();
    EmbeddingBlock b{side, side, config.embedding_channels, {}};
    b.values.assign(batch.row(row), batch.row(row) + batch.dim);
    return b;
}

EmbeddingBatch to_batch(const std::vector<EmbeddingBlock>& blocks) {
    EmbeddingBatch batch;
    batch.count = blocks.size();
    batch.dim = blocks.empty() ? 0 : blocks.front().values.size();
    for (const auto& b : blocks) {
        if (b.values.size() != batch.dim) throw Error(ErrorKind::ShapeMismatch, "embedding blocks differ in size");
        batch.values.insert(batch.values.end(), b.values.begin(), b.values.end());
    }
    return batch;
}

}  // namespace malimg
