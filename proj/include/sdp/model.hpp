#pragma once

// Variational-encoder + transformer defect classifier.
//
// Pipeline for one record x (already z-normalized):
//   phi   = angle encoding of x                       (2*arity)
//   mu, logvar = two tanh dense layers + linear heads (latent_dim each)
//   z     = mu + exp(logvar/2) * eps
//   recon = tanh dense + linear decoder of z          (2*arity)
//   X     = z reshaped to token_count x embed_dim, plus positional embeddings
//   X     = n_layers x [self-attention, residual, layer norm,
//                       tanh feed-forward, residual, layer norm]
//   q     = mean of the token rows
//   p     = logistic(head_w . q + head_b)
//
// Loss per batch: mean(BCE + recon_weight * MSE(recon, phi) + kl_weight * KL)
//                 + l2_reg * sum of squared projection weights.
// Gradients are analytic; the test suite checks them against finite differences.

#include <sdp/anra.hpp>
#include <sdp/dataset.hpp>
#include <sdp/error.hpp>
#include <sdp/rng.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

namespace sdp {

using Matrix = Eigen::MatrixXd;

struct HyperParams {
    double learning_rate = 0.05;
    double l2_reg = 1e-4;
    int n_layers = 1;
    int latent_dim = 8;
    int token_count = 2;
    double kl_weight = 0.01;
    double recon_weight = 0.1;
    int epochs = 40;
    int batch_size = 16;
    int head_count = 2;
    int hidden_dim = 16; // encoder/decoder width

    int embed_dim() const noexcept { return token_count > 0 ? latent_dim / token_count : 0; }
    int ffn_dim() const noexcept { return 2 * embed_dim(); }

    void validate() const
    {
        auto fail = [](const std::string& msg) { throw ConfigError("hyperparameters: " + msg); };
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            fail("learning_rate must be > 0");
        if (!(l2_reg >= 0.0))
            fail("l2_reg must be >= 0");
        if (!(kl_weight >= 0.0))
            fail("kl_weight must be >= 0");
        if (!(recon_weight >= 0.0))
            fail("recon_weight must be >= 0");
        if (n_layers < 1)
            fail("n_layers must be >= 1");
        if (token_count < 1 || latent_dim < token_count || latent_dim % token_count != 0)
            fail("latent_dim must be a positive multiple of token_count");
        if (head_count < 1 || embed_dim() % head_count != 0)
            fail("head_count must divide embed_dim");
        if (epochs < 0)
            fail("epochs must be >= 0");
        if (batch_size < 1)
            fail("batch_size must be >= 1");
        if (hidden_dim < 1)
            fail("hidden_dim must be >= 1");
    }

    bool operator==(const HyperParams&) const = default;
};

struct BlockParams {
    Matrix query, key, value;  // embed x embed, applied as X * W
    Matrix out_w, out_b;       // embed x embed, 1 x embed
    Matrix ln1_gain, ln1_bias; // 1 x embed
    Matrix ff1_w, ff1_b;       // embed x ffn, 1 x ffn
    Matrix ff2_w, ff2_b;       // ffn x embed, 1 x embed
    Matrix ln2_gain, ln2_bias; // 1 x embed
};

template <typename M>
struct TensorView {
    std::string name;
    M* value;
    bool regularized;
};

struct ModelParams {
    // Column-vector convention: W is out x in, b is out x 1.
    Matrix enc1_w, enc1_b; // feature-map projection
    Matrix enc2_w, enc2_b;
    Matrix mu_w, mu_b;
    Matrix logvar_w, logvar_b;
    Matrix dec1_w, dec1_b;
    Matrix dec2_w, dec2_b;
    // Row convention for tokens: X is token_count x embed.
    Matrix positional;
    std::vector<BlockParams> blocks;
    Matrix head_w, head_b; // 1 x embed, 1 x 1

    template <typename Self>
    static auto views(Self& self)
    {
        using M = std::conditional_t<std::is_const_v<Self>, const Matrix, Matrix>;
        std::vector<TensorView<M>> v{
            {"encoder.dense1.weight", &self.enc1_w, true},
            {"encoder.dense1.bias", &self.enc1_b, false},
            {"encoder.dense2.weight", &self.enc2_w, true},
            {"encoder.dense2.bias", &self.enc2_b, false},
            {"encoder.mu.weight", &self.mu_w, true},
            {"encoder.mu.bias", &self.mu_b, false},
            {"encoder.logvar.weight", &self.logvar_w, true},
            {"encoder.logvar.bias", &self.logvar_b, false},
            {"decoder.dense1.weight", &self.dec1_w, true},
            {"decoder.dense1.bias", &self.dec1_b, false},
            {"decoder.dense2.weight", &self.dec2_w, true},
            {"decoder.dense2.bias", &self.dec2_b, false},
            {"transformer.positional", &self.positional, false},
        };
        for (std::size_t l = 0; l < self.blocks.size(); ++l) {
            auto& b = self.blocks[l];
            const std::string p = "transformer.block" + std::to_string(l) + ".";
            v.push_back({p + "attn.query", &b.query, true});
            v.push_back({p + "attn.key", &b.key, true});
            v.push_back({p + "attn.value", &b.value, true});
            v.push_back({p + "attn.out.weight", &b.out_w, true});
            v.push_back({p + "attn.out.bias", &b.out_b, false});
            v.push_back({p + "norm1.gain", &b.ln1_gain, false});
            v.push_back({p + "norm1.bias", &b.ln1_bias, false});
            v.push_back({p + "ffn1.weight", &b.ff1_w, true});
            v.push_back({p + "ffn1.bias", &b.ff1_b, false});
            v.push_back({p + "ffn2.weight", &b.ff2_w, true});
            v.push_back({p + "ffn2.bias", &b.ff2_b, false});
            v.push_back({p + "norm2.gain", &b.ln2_gain, false});
            v.push_back({p + "norm2.bias", &b.ln2_bias, false});
        }
        v.push_back({"head.weight", &self.head_w, true});
        v.push_back({"head.bias", &self.head_b, false});
        return v;
    }

    auto tensors() { return views(*this); }
    auto tensors() const { return views(*this); }

    /// Correctly shaped, all zeros (layer-norm gains included).
    static ModelParams zeros(std::size_t arity, const HyperParams& h)
    {
        const auto in = static_cast<Eigen::Index>(2 * arity);
        const Eigen::Index hid = h.hidden_dim, lat = h.latent_dim, tok = h.token_count,
                           emb = h.embed_dim(), ffn = h.ffn_dim();
        ModelParams p;
        p.enc1_w = Matrix::Zero(hid, in);
        p.enc1_b = Matrix::Zero(hid, 1);
        p.enc2_w = Matrix::Zero(hid, hid);
        p.enc2_b = Matrix::Zero(hid, 1);
        p.mu_w = Matrix::Zero(lat, hid);
        p.mu_b = Matrix::Zero(lat, 1);
        p.logvar_w = Matrix::Zero(lat, hid);
        p.logvar_b = Matrix::Zero(lat, 1);
        p.dec1_w = Matrix::Zero(hid, lat);
        p.dec1_b = Matrix::Zero(hid, 1);
        p.dec2_w = Matrix::Zero(in, hid);
        p.dec2_b = Matrix::Zero(in, 1);
        p.positional = Matrix::Zero(tok, emb);
        p.blocks.resize(static_cast<std::size_t>(h.n_layers));
        for (auto& b : p.blocks) {
            b.query = b.key = b.value = b.out_w = Matrix::Zero(emb, emb);
            b.out_b = b.ln1_gain = b.ln1_bias = b.ln2_gain = b.ln2_bias = b.ff2_b =
                Matrix::Zero(1, emb);
            b.ff1_w = Matrix::Zero(emb, ffn);
            b.ff1_b = Matrix::Zero(1, ffn);
            b.ff2_w = Matrix::Zero(ffn, emb);
        }
        p.head_w = Matrix::Zero(1, emb);
        p.head_b = Matrix::Zero(1, 1);
        return p;
    }

    /// Weights uniform in [-s, s], s = sqrt(6 / (fan_in + fan_out)); biases
    /// zero; layer-norm gains one.
    static ModelParams initialize(std::size_t arity, const HyperParams& h, Rng& rng)
    {
        ModelParams p = zeros(arity, h);
        auto glorot = [&](Matrix& m) {
            const double s = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                for (Eigen::Index r = 0; r < m.rows(); ++r)
                    m(r, c) = rng.uniform(-s, s);
        };
        for (auto& t : p.tensors())
            if (t.regularized || t.name == "transformer.positional")
                glorot(*t.value);
        for (auto& b : p.blocks) {
            b.ln1_gain.setOnes();
            b.ln2_gain.setOnes();
        }
        return p;
    }

    void set_zero()
    {
        for (auto& t : tensors())
            t.value->setZero();
    }

    bool all_finite() const
    {
        for (const auto& t : tensors())
            if (!t.value->allFinite())
                return false;
        return true;
    }

    bool operator==(const ModelParams& o) const
    {
        const auto a = tensors();
        const auto b = o.tensors();
        if (a.size() != b.size())
            return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].value->rows() != b[i].value->rows() ||
                a[i].value->cols() != b[i].value->cols() || *a[i].value != *b[i].value)
                return false;
        return true;
    }
};

// ---------------------------------------------------------------------------
// Individual stages

/// Angle encoding [cos(pi x_1), sin(pi x_1), ..., cos(pi x_d), sin(pi x_d)]:
/// the classical simulation of a product-state rotation encoding.
inline Matrix quantum_feature_map(std::span<const double> x)
{
    Matrix out(static_cast<Eigen::Index>(2 * x.size()), 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double angle = std::numbers::pi * x[i];
        out(static_cast<Eigen::Index>(2 * i), 0) = std::cos(angle);
        out(static_cast<Eigen::Index>(2 * i + 1), 0) = std::sin(angle);
    }
    return out;
}

/// Model input for a normalized record. Each z-score is squashed into (0, 1)
/// by (1 + tanh(x)) / 2 before the angle encoding, so rotation angles stay in
/// (0, pi) and distinct records never alias onto the same point of the circle.
inline Matrix encode_input(std::span<const double> normalized)
{
    std::vector<double> squashed(normalized.begin(), normalized.end());
    for (double& v : squashed)
        v = 0.5 * (1.0 + std::tanh(v));
    return quantum_feature_map(squashed);
}

struct LatentSample {
    Matrix mu, logvar, z; // latent_dim x 1
};

struct EncoderTrace {
    Matrix h1, h2, sd;
};

inline void check_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* what)
{
    if (m.rows() != rows || m.cols() != cols)
        throw ConfigError(std::string("shape mismatch in ") + what + ": got " +
                          std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                          ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
}

inline LatentSample encode(const Matrix& phi, const ModelParams& p, const Matrix& eps,
                           EncoderTrace* trace = nullptr)
{
    check_shape(phi, p.enc1_w.cols(), 1, "encode input");
    check_shape(eps, p.mu_w.rows(), 1, "encode noise");
    Matrix h1 = (p.enc1_w * phi + p.enc1_b).array().tanh().matrix();
    Matrix h2 = (p.enc2_w * h1 + p.enc2_b).array().tanh().matrix();
    LatentSample s;
    s.mu = p.mu_w * h2 + p.mu_b;
    s.logvar = p.logvar_w * h2 + p.logvar_b;
    Matrix sd = (0.5 * s.logvar.array()).exp().matrix();
    s.z = s.mu + sd.cwiseProduct(eps);
    if (trace)
        *trace = {std::move(h1), std::move(h2), std::move(sd)};
    return s;
}

/// Closed-form KL(N(mu, exp(logvar)) || N(0, I)).
inline double kl_divergence(const Matrix& mu, const Matrix& logvar)
{
    if (mu.size() != logvar.size())
        throw ConfigError("kl_divergence: mu and logvar lengths differ");
    return 0.5 * (mu.array().square() + logvar.array().exp() - 1.0 - logvar.array()).sum();
}

inline Matrix decode(const Matrix& z, const ModelParams& p, Matrix* hidden = nullptr)
{
    check_shape(z, p.dec1_w.cols(), 1, "decode input");
    Matrix hd = (p.dec1_w * z + p.dec1_b).array().tanh().matrix();
    Matrix r = p.dec2_w * hd + p.dec2_b;
    if (hidden)
        *hidden = std::move(hd);
    return r;
}

namespace detail {

constexpr double kLayerNormEps = 1e-5;

struct LayerNormTrace {
    Matrix hat;     // normalized rows
    Matrix inv_std; // rows x 1
};

inline Matrix layer_norm(const Matrix& y, const Matrix& gain, const Matrix& bias,
                         LayerNormTrace& tr)
{
    const auto d = static_cast<double>(y.cols());
    tr.hat.resize(y.rows(), y.cols());
    tr.inv_std.resize(y.rows(), 1);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double mean = y.row(r).sum() / d;
        const auto centered = (y.row(r).array() - mean).eval();
        const double var = centered.square().sum() / d;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        tr.inv_std(r, 0) = inv;
        tr.hat.row(r) = centered.matrix() * inv;
    }
    Matrix out = tr.hat.array().rowwise() * gain.row(0).array();
    out.array().rowwise() += bias.row(0).array();
    return out;
}

inline Matrix layer_norm_backward(const Matrix& dout, const Matrix& gain,
                                  const LayerNormTrace& tr, Matrix& dgain, Matrix& dbias)
{
    dgain += dout.cwiseProduct(tr.hat).colwise().sum();
    dbias += dout.colwise().sum();
    const Matrix dhat = dout.array().rowwise() * gain.row(0).array();
    const auto d = static_cast<double>(dout.cols());
    Matrix dy(dout.rows(), dout.cols());
    for (Eigen::Index r = 0; r < dout.rows(); ++r) {
        const double m1 = dhat.row(r).sum() / d;
        const double m2 = dhat.row(r).cwiseProduct(tr.hat.row(r)).sum() / d;
        dy.row(r) = tr.inv_std(r, 0) *
                    (dhat.row(r).array() - m1 - tr.hat.row(r).array() * m2).matrix();
    }
    return dy;
}

inline void softmax_rows(Matrix& s)
{
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp().matrix();
        s.row(r) /= s.row(r).sum();
    }
}

struct BlockTrace {
    Matrix x_in, q, k, v;
    std::vector<Matrix> attn; // per head, token x token
    Matrix concat;            // token x embed
    LayerNormTrace ln1;
    Matrix n1, hf;
    LayerNormTrace ln2;
};

inline Matrix block_forward(const Matrix& x, const BlockParams& b, int heads, BlockTrace& tr)
{
    const Eigen::Index tokens = x.rows(), emb = x.cols(), dh = emb / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    tr.x_in = x;
    tr.q = x * b.query;
    tr.k = x * b.key;
    tr.v = x * b.value;
    tr.attn.resize(static_cast<std::size_t>(heads));
    tr.concat.resize(tokens, emb);
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index c0 = h * dh;
        Matrix s = scale * tr.q.middleCols(c0, dh) * tr.k.middleCols(c0, dh).transpose();
        softmax_rows(s);
        tr.concat.middleCols(c0, dh) = s * tr.v.middleCols(c0, dh);
        tr.attn[static_cast<std::size_t>(h)] = std::move(s);
    }
    Matrix y1 = x + tr.concat * b.out_w;
    y1.array().rowwise() += b.out_b.row(0).array();
    tr.n1 = layer_norm(y1, b.ln1_gain, b.ln1_bias, tr.ln1);
    Matrix a = tr.n1 * b.ff1_w;
    a.array().rowwise() += b.ff1_b.row(0).array();
    tr.hf = a.array().tanh().matrix();
    Matrix y2 = tr.n1 + tr.hf * b.ff2_w;
    y2.array().rowwise() += b.ff2_b.row(0).array();
    return layer_norm(y2, b.ln2_gain, b.ln2_bias, tr.ln2);
}

inline Matrix block_backward(const Matrix& dout, const BlockParams& b, int heads,
                             const BlockTrace& tr, BlockParams& g)
{
    const Eigen::Index emb = dout.cols(), dh = emb / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const Matrix dy2 = layer_norm_backward(dout, b.ln2_gain, tr.ln2, g.ln2_gain, g.ln2_bias);
    g.ff2_w += tr.hf.transpose() * dy2;
    g.ff2_b += dy2.colwise().sum();
    const Matrix da = (dy2 * b.ff2_w.transpose()).cwiseProduct(
        (1.0 - tr.hf.array().square()).matrix());
    g.ff1_w += tr.n1.transpose() * da;
    g.ff1_b += da.colwise().sum();
    const Matrix dn1 = dy2 + da * b.ff1_w.transpose();

    const Matrix dy1 = layer_norm_backward(dn1, b.ln1_gain, tr.ln1, g.ln1_gain, g.ln1_bias);
    g.out_w += tr.concat.transpose() * dy1;
    g.out_b += dy1.colwise().sum();
    const Matrix dconcat = dy1 * b.out_w.transpose();

    Matrix dq(dout.rows(), emb), dk(dout.rows(), emb), dv(dout.rows(), emb);
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index c0 = h * dh;
        const Matrix& a = tr.attn[static_cast<std::size_t>(h)];
        const auto dO = dconcat.middleCols(c0, dh);
        const Matrix dA = dO * tr.v.middleCols(c0, dh).transpose();
        dv.middleCols(c0, dh) = a.transpose() * dO;
        Matrix dS = dA;
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            const double dot = a.row(r).dot(dA.row(r));
            dS.row(r) = a.row(r).cwiseProduct((dA.row(r).array() - dot).matrix());
        }
        dq.middleCols(c0, dh) = scale * dS * tr.k.middleCols(c0, dh);
        dk.middleCols(c0, dh) = scale * dS.transpose() * tr.q.middleCols(c0, dh);
    }
    g.query += tr.x_in.transpose() * dq;
    g.key += tr.x_in.transpose() * dk;
    g.value += tr.x_in.transpose() * dv;
    return dy1 + dq * b.query.transpose() + dk * b.key.transpose() + dv * b.value.transpose();
}

} // namespace detail

struct ContextFeatures {
    Matrix q; // embed x 1
};

struct TransformerTrace {
    std::vector<detail::BlockTrace> blocks;
};

/// Reshapes z (row-major) into token_count x embed_dim tokens.
inline Matrix tokens_from_latent(const Matrix& z, Eigen::Index token_count)
{
    const Eigen::Index emb = z.rows() / token_count;
    Matrix x(token_count, emb);
    for (Eigen::Index t = 0; t < token_count; ++t)
        for (Eigen::Index j = 0; j < emb; ++j)
            x(t, j) = z(t * emb + j, 0);
    return x;
}

inline ContextFeatures transformer_forward(const Matrix& z, const ModelParams& p, int head_count,
                                           TransformerTrace* trace = nullptr)
{
    const Eigen::Index tokens = p.positional.rows(), emb = p.positional.cols();
    check_shape(z, tokens * emb, 1, "transformer input");
    if (head_count < 1 || emb % head_count != 0)
        throw ConfigError("transformer: head_count must divide embed_dim");
    TransformerTrace local;
    TransformerTrace& tr = trace ? *trace : local;
    tr.blocks.resize(p.blocks.size());
    Matrix x = tokens_from_latent(z, tokens) + p.positional;
    for (std::size_t l = 0; l < p.blocks.size(); ++l)
        x = detail::block_forward(x, p.blocks[l], head_count, tr.blocks[l]);
    return {x.colwise().mean().transpose()};
}

struct Prediction {
    double probability = 0.5;
    int label = 0; // 1 iff probability >= 0.5

    static Prediction from_logit(double logit)
    {
        const double p = logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit))
                                       : std::exp(logit) / (1.0 + std::exp(logit));
        return {p, p >= 0.5 ? 1 : 0};
    }
};

inline double head_logit(const ContextFeatures& q, const ModelParams& p)
{
    return (p.head_w * q.q)(0, 0) + p.head_b(0, 0);
}

inline Prediction predict(const ContextFeatures& q, const ModelParams& p)
{
    check_shape(q.q, p.head_w.cols(), 1, "prediction input");
    return Prediction::from_logit(head_logit(q, p));
}

// ---------------------------------------------------------------------------
// Loss and gradient

/// Normalized features (one row per record), labels, and one noise row per record.
struct Batch {
    Matrix features; // n x arity
    std::vector<int> labels;
};

struct LossParts {
    double total = 0.0;
    double bce = 0.0;   // batch means
    double recon = 0.0;
    double kl = 0.0;
    double l2 = 0.0;
};

namespace detail {

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct RecordTrace {
    Matrix phi;
    EncoderTrace enc;
    LatentSample latent;
    Matrix dec_hidden, recon;
    TransformerTrace tf;
    ContextFeatures ctx;
    double logit = 0.0;
};

inline std::vector<double> row_of(const Matrix& m, Eigen::Index r)
{
    std::vector<double> out(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        out[static_cast<std::size_t>(c)] = m(r, c);
    return out;
}

/// Unregularized per-record loss; fills the trace for backprop.
inline double record_forward(const Matrix& features, Eigen::Index r, int label, const Matrix& eps,
                             const ModelParams& p, const HyperParams& h, RecordTrace& tr,
                             LossParts& parts)
{
    tr.phi = encode_input(row_of(features, r));
    tr.latent = encode(tr.phi, p, eps.row(r).transpose(), &tr.enc);
    tr.ctx = transformer_forward(tr.latent.z, p, h.head_count, &tr.tf);
    tr.logit = head_logit(tr.ctx, p);
    const double bce = softplus(tr.logit) - label * tr.logit;
    double recon = 0.0;
    if (h.recon_weight > 0.0) {
        tr.recon = decode(tr.latent.z, p, &tr.dec_hidden);
        recon = (tr.recon - tr.phi).squaredNorm() / static_cast<double>(tr.phi.rows());
    }
    const double kl = h.kl_weight > 0.0 ? kl_divergence(tr.latent.mu, tr.latent.logvar) : 0.0;
    parts.bce += bce;
    parts.recon += recon;
    parts.kl += kl;
    return bce + h.recon_weight * recon + h.kl_weight * kl;
}

/// Accumulates scale * d(record loss)/d(params) into g.
inline void record_backward(int label, const Matrix& eps_row, const ModelParams& p,
                            const HyperParams& h, const RecordTrace& tr, double scale,
                            ModelParams& g)
{
    const double dlogit = scale * (Prediction::from_logit(tr.logit).probability - label);
    g.head_w += dlogit * tr.ctx.q.transpose();
    g.head_b(0, 0) += dlogit;

    const Eigen::Index tokens = p.positional.rows();
    Matrix dx = p.head_w.replicate(tokens, 1) * (dlogit / static_cast<double>(tokens));
    for (std::size_t l = p.blocks.size(); l-- > 0;)
        dx = block_backward(dx, p.blocks[l], h.head_count, tr.tf.blocks[l], g.blocks[l]);
    g.positional += dx;

    Matrix dz(dx.size(), 1);
    for (Eigen::Index t = 0; t < dx.rows(); ++t)
        for (Eigen::Index j = 0; j < dx.cols(); ++j)
            dz(t * dx.cols() + j, 0) = dx(t, j);

    if (h.recon_weight > 0.0) {
        const Matrix dr = (scale * h.recon_weight * 2.0 / static_cast<double>(tr.phi.rows())) *
                          (tr.recon - tr.phi);
        g.dec2_w += dr * tr.dec_hidden.transpose();
        g.dec2_b += dr;
        const Matrix dad = (p.dec2_w.transpose() * dr)
                               .cwiseProduct((1.0 - tr.dec_hidden.array().square()).matrix());
        g.dec1_w += dad * tr.latent.z.transpose();
        g.dec1_b += dad;
        dz += p.dec1_w.transpose() * dad;
    }

    const auto& lat = tr.latent;
    Matrix dmu = dz + (scale * h.kl_weight) * lat.mu;
    Matrix dlv = 0.5 * dz.cwiseProduct(eps_row).cwiseProduct(tr.enc.sd) +
                 (scale * h.kl_weight * 0.5) * (lat.logvar.array().exp() - 1.0).matrix();
    g.mu_w += dmu * tr.enc.h2.transpose();
    g.mu_b += dmu;
    g.logvar_w += dlv * tr.enc.h2.transpose();
    g.logvar_b += dlv;
    const Matrix da2 = (p.mu_w.transpose() * dmu + p.logvar_w.transpose() * dlv)
                           .cwiseProduct((1.0 - tr.enc.h2.array().square()).matrix());
    g.enc2_w += da2 * tr.enc.h1.transpose();
    g.enc2_b += da2;
    const Matrix da1 =
        (p.enc2_w.transpose() * da2).cwiseProduct((1.0 - tr.enc.h1.array().square()).matrix());
    g.enc1_w += da1 * tr.phi.transpose();
    g.enc1_b += da1;
}

inline double l2_penalty(const ModelParams& p)
{
    double s = 0.0;
    for (const auto& t : p.tensors())
        if (t.regularized)
            s += t.value->squaredNorm();
    return s;
}

inline void check_batch(const Batch& batch, const ModelParams& p, const HyperParams& h,
                        const Matrix& eps)
{
    if (batch.features.rows() == 0)
        throw ConfigError("loss: batch is empty");
    if (static_cast<std::size_t>(batch.features.rows()) != batch.labels.size())
        throw ConfigError("loss: feature rows and labels differ in count");
    if (batch.features.cols() * 2 != p.enc1_w.cols())
        throw ConfigError("loss: feature arity does not match the model");
    if (eps.rows() != batch.features.rows() || eps.cols() != h.latent_dim)
        throw ConfigError("loss: noise must be batch x latent_dim");
}

} // namespace detail

inline LossParts loss_parts(const Batch& batch, const ModelParams& p, const HyperParams& h,
                            const Matrix& eps)
{
    detail::check_batch(batch, p, h, eps);
    LossParts parts;
    detail::RecordTrace tr;
    double sum = 0.0;
    const Eigen::Index n = batch.features.rows();
    for (Eigen::Index r = 0; r < n; ++r)
        sum += detail::record_forward(batch.features, r, batch.labels[static_cast<std::size_t>(r)],
                                      eps, p, h, tr, parts);
    const auto dn = static_cast<double>(n);
    parts.bce /= dn;
    parts.recon /= dn;
    parts.kl /= dn;
    parts.l2 = h.l2_reg > 0.0 ? h.l2_reg * detail::l2_penalty(p) : 0.0;
    parts.total = sum / dn + parts.l2;
    return parts;
}

inline double loss(const Batch& batch, const ModelParams& p, const HyperParams& h,
                   const Matrix& eps)
{
    return loss_parts(batch, p, h, eps).total;
}

struct LossAndGradient {
    double loss = 0.0;
    ModelParams grad;
};

/// Exact gradient of `loss` with respect to every parameter, eps held fixed.
inline LossAndGradient gradient(const Batch& batch, const ModelParams& p, const HyperParams& h,
                                const Matrix& eps)
{
    detail::check_batch(batch, p, h, eps);
    LossAndGradient out;
    out.grad = p;
    out.grad.set_zero();
    LossParts parts;
    detail::RecordTrace tr;
    const Eigen::Index n = batch.features.rows();
    const double scale = 1.0 / static_cast<double>(n);
    double sum = 0.0;
    for (Eigen::Index r = 0; r < n; ++r) {
        const int y = batch.labels[static_cast<std::size_t>(r)];
        sum += detail::record_forward(batch.features, r, y, eps, p, h, tr, parts);
        detail::record_backward(y, eps.row(r).transpose(), p, h, tr, scale, out.grad);
    }
    out.loss = sum * scale;
    if (h.l2_reg > 0.0) {
        out.loss += h.l2_reg * detail::l2_penalty(p);
        auto gs = out.grad.tensors();
        const auto ps = p.tensors();
        for (std::size_t i = 0; i < gs.size(); ++i)
            if (gs[i].regularized)
                *gs[i].value += 2.0 * h.l2_reg * *ps[i].value;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training and inference

struct TrainedModel {
    ModelParams params;
    HyperParams hyper;
    NormStats norm;
    FeatureSchema schema;
    std::vector<double> loss_history;
};

inline Batch to_batch(const Dataset& ds)
{
    Batch b;
    b.features.resize(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(ds.arity()));
    b.labels.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& r = ds.records[i];
        for (std::size_t f = 0; f < r.features.size(); ++f)
            b.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f)) = r.features[f];
        b.labels.push_back(r.label);
    }
    return b;
}

/// Mini-batch gradient descent on the normalized training set.
inline TrainedModel train(const PreprocessedDataset& train_set, const HyperParams& hyper,
                          std::uint64_t seed)
{
    hyper.validate();
    const auto counts = train_set.data.class_counts();
    if (counts[0] == 0 || counts[1] == 0)
        throw DataError("train: training set must contain both classes");

    TrainedModel model;
    model.hyper = hyper;
    model.norm = train_set.norm;
    model.schema = train_set.data.schema;
    Rng init_rng(derive_seed(seed, 0x1417));
    model.params = ModelParams::initialize(train_set.data.arity(), hyper, init_rng);

    const Batch all = to_batch(train_set.data);
    const auto n = static_cast<std::size_t>(all.features.rows());
    Rng rng(derive_seed(seed, 0x7a11));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Batch batch;
    Matrix eps;

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(hyper.batch_size)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(hyper.batch_size));
            const auto rows = static_cast<Eigen::Index>(stop - start);
            batch.features.resize(rows, all.features.cols());
            batch.labels.resize(static_cast<std::size_t>(rows));
            eps.resize(rows, hyper.latent_dim);
            for (Eigen::Index r = 0; r < rows; ++r) {
                const auto src = static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(r)]);
                batch.features.row(r) = all.features.row(src);
                batch.labels[static_cast<std::size_t>(r)] = all.labels[static_cast<std::size_t>(src)];
                for (Eigen::Index j = 0; j < eps.cols(); ++j)
                    eps(r, j) = rng.normal();
            }
            auto lg = gradient(batch, model.params, hyper, eps);
            if (!std::isfinite(lg.loss))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   " (learning rate too large?)");
            epoch_loss += lg.loss * static_cast<double>(rows);
            auto ps = model.params.tensors();
            const auto gs = lg.grad.tensors();
            for (std::size_t i = 0; i < ps.size(); ++i)
                *ps[i].value -= hyper.learning_rate * *gs[i].value;
        }
        epoch_loss /= static_cast<double>(n);
        if (!std::isfinite(epoch_loss) || !model.params.all_finite())
            throw NumericError("train: non-finite parameters at epoch " + std::to_string(epoch) +
                               " (learning rate too large?)");
        model.loss_history.push_back(epoch_loss);
    }
    return model;
}

/// Deterministic prediction for an already-normalized record (z = mu).
inline Prediction infer_normalized(const TrainedModel& model, std::span<const double> normalized)
{
    const Matrix phi = encode_input(normalized);
    const Matrix eps = Matrix::Zero(model.hyper.latent_dim, 1);
    const auto latent = encode(phi, model.params, eps);
    return predict(transformer_forward(latent.z, model.params, model.hyper.head_count),
                   model.params);
}

inline Prediction infer(const TrainedModel& model, std::span<const double> raw)
{
    if (raw.size() != model.norm.arity())
        throw DataError("infer: record has " + std::to_string(raw.size()) +
                        " features, model expects " + std::to_string(model.norm.arity()));
    std::vector<double> x(raw.begin(), raw.end());
    model.norm.normalize_in_place(x);
    return infer_normalized(model, x);
}

// ---------------------------------------------------------------------------
// Checkpoints (text, `sdpm-v1`)

inline void save_checkpoint(std::ostream& out, const TrainedModel& m)
{
    using detail::format_real;
    const auto& h = m.hyper;
    out << "sdpm-v1\n";
    out << "label " << m.schema.label_name << '\n';
    out << "features ";
    for (std::size_t i = 0; i < m.schema.feature_names.size(); ++i)
        out << (i ? "," : "") << m.schema.feature_names[i];
    out << '\n';
    out << "hyper learning_rate " << format_real(h.learning_rate) << '\n'
        << "hyper l2_reg " << format_real(h.l2_reg) << '\n'
        << "hyper n_layers " << h.n_layers << '\n'
        << "hyper latent_dim " << h.latent_dim << '\n'
        << "hyper token_count " << h.token_count << '\n'
        << "hyper kl_weight " << format_real(h.kl_weight) << '\n'
        << "hyper recon_weight " << format_real(h.recon_weight) << '\n'
        << "hyper epochs " << h.epochs << '\n'
        << "hyper batch_size " << h.batch_size << '\n'
        << "hyper head_count " << h.head_count << '\n'
        << "hyper hidden_dim " << h.hidden_dim << '\n';
    auto reals = [&](const char* key, const auto& values) {
        out << key << ' ' << values.size();
        for (auto v : values)
            out << ' ' << format_real(static_cast<double>(v));
        out << '\n';
    };
    reals("norm_mean", m.norm.mean);
    reals("norm_std", m.norm.std);
    reals("norm_constant", m.norm.constant);
    reals("loss_history", m.loss_history);
    for (const auto& t : m.params.tensors()) {
        out << "tensor " << t.name << ' ' << t.value->rows() << ' ' << t.value->cols() << '\n';
        for (Eigen::Index r = 0; r < t.value->rows(); ++r) {
            for (Eigen::Index c = 0; c < t.value->cols(); ++c)
                out << (c ? " " : "") << format_real((*t.value)(r, c));
            out << '\n';
        }
    }
    out << "end\n";
}

inline TrainedModel load_checkpoint(std::istream& in, const std::string& source = "<stream>")
{
    auto fail = [&](const std::string& msg) -> DataError {
        return DataError(source + ": bad checkpoint: " + msg);
    };
    std::string line;
    if (!std::getline(in, line) || detail::trim(line) != "sdpm-v1")
        throw fail("missing 'sdpm-v1' header");

    auto expect = [&](const std::string& key) {
        std::string word;
        if (!(in >> word) || word != key)
            throw fail("expected '" + key + "', found '" + word + "'");
    };
    auto read_real = [&]() {
        std::string tok;
        double v = 0.0;
        if (!(in >> tok) || !detail::parse_real(tok, v))
            throw fail("expected a number, found '" + tok + "'");
        return v;
    };
    auto read_int = [&]() {
        const double v = read_real();
        if (v != std::floor(v))
            throw fail("expected an integer");
        return static_cast<int>(v);
    };
    auto read_list = [&](const std::string& key) {
        expect(key);
        const int n = read_int();
        if (n < 0)
            throw fail("negative length for " + key);
        std::vector<double> v(static_cast<std::size_t>(n));
        for (double& x : v)
            x = read_real();
        return v;
    };

    TrainedModel m;
    expect("label");
    in >> m.schema.label_name;
    expect("features");
    std::string names;
    in >> std::ws;
    std::getline(in, names);
    for (auto f : detail::split_fields(names))
        m.schema.feature_names.emplace_back(f);

    auto& h = m.hyper;
    auto hyper = [&](const char* key) {
        expect("hyper");
        expect(key);
    };
    hyper("learning_rate"); h.learning_rate = read_real();
    hyper("l2_reg"); h.l2_reg = read_real();
    hyper("n_layers"); h.n_layers = read_int();
    hyper("latent_dim"); h.latent_dim = read_int();
    hyper("token_count"); h.token_count = read_int();
    hyper("kl_weight"); h.kl_weight = read_real();
    hyper("recon_weight"); h.recon_weight = read_real();
    hyper("epochs"); h.epochs = read_int();
    hyper("batch_size"); h.batch_size = read_int();
    hyper("head_count"); h.head_count = read_int();
    hyper("hidden_dim"); h.hidden_dim = read_int();
    try {
        h.validate();
    } catch (const ConfigError& e) {
        throw fail(e.what());
    }

    m.norm.mean = read_list("norm_mean");
    m.norm.std = read_list("norm_std");
    for (double c : read_list("norm_constant"))
        m.norm.constant.push_back(c != 0.0);
    m.loss_history = read_list("loss_history");
    if (m.norm.std.size() != m.norm.arity() || m.norm.constant.size() != m.norm.arity() ||
        m.norm.arity() != m.schema.arity())
        throw fail("normalization arity does not match the schema");

    m.params = ModelParams::zeros(m.schema.arity(), h);
    for (auto& t : m.params.tensors()) {
        expect("tensor");
        expect(t.name);
        const int rows = read_int();
        const int cols = read_int();
        if (rows != t.value->rows() || cols != t.value->cols())
            throw fail("tensor " + t.name + " has the wrong shape");
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c)
                (*t.value)(r, c) = read_real();
    }
    expect("end");
    return m;
}

inline void save_checkpoint(const std::string& path, const TrainedModel& m)
{
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write checkpoint '" + path + "'");
    save_checkpoint(out, m);
}

inline TrainedModel load_checkpoint(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open checkpoint '" + path + "'");
    return load_checkpoint(in, path);
}

} // namespace sdp
