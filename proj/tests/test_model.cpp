#include <sdp/anra.hpp>
#include <sdp/model.hpp>

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace sdp;

namespace {

HyperParams small_hyper()
{
    HyperParams h;
    h.latent_dim = 8;
    h.token_count = 2;
    h.head_count = 2;
    h.hidden_dim = 6;
    h.n_layers = 2;
    h.kl_weight = 0.3;
    h.recon_weight = 0.5;
    h.l2_reg = 1e-3;
    return h;
}

PreprocessedDataset toy_blobs()
{
    const auto raw = oracle::gaussian_blobs(200, 0.5, 3.0, 17);
    AnraConfig cfg;
    cfg.seed = 1;
    return anra_pipeline(raw, cfg);
}

Matrix column(std::initializer_list<double> v)
{
    Matrix m(static_cast<Eigen::Index>(v.size()), 1);
    Eigen::Index i = 0;
    for (double x : v)
        m(i++, 0) = x;
    return m;
}

} // namespace

TEST(HyperParams, Invariants)
{
    HyperParams h;
    EXPECT_NO_THROW(h.validate());
    EXPECT_EQ(h.embed_dim() * h.token_count, h.latent_dim);
    auto bad = h;
    bad.latent_dim = 7;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = h;
    bad.head_count = 3;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = h;
    bad.learning_rate = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = h;
    bad.n_layers = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = h;
    bad.l2_reg = -1;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(FeatureMap, Examples)
{
    const double zero[] = {0.0};
    const auto a = quantum_feature_map(zero);
    EXPECT_EQ(a(0, 0), 1.0);
    EXPECT_EQ(a(1, 0), 0.0);
    const double half[] = {0.5};
    const auto b = quantum_feature_map(half);
    EXPECT_NEAR(b(0, 0), 0.0, 1e-15);
    EXPECT_EQ(b(1, 0), 1.0);
}

TEST(FeatureMap, PairsOnUnitCircle)
{
    Rng rng(1);
    std::vector<double> x(50);
    for (double& v : x)
        v = rng.normal(0, 20);
    const auto phi = quantum_feature_map(x);
    ASSERT_EQ(phi.rows(), 100);
    for (Eigen::Index i = 0; i < 50; ++i) {
        const double c = phi(2 * i, 0), s = phi(2 * i + 1, 0);
        EXPECT_NEAR(c * c + s * s, 1.0, 1e-12);
    }
    const auto enc = encode_input(x);
    for (Eigen::Index i = 0; i < 50; ++i)
        EXPECT_GE(enc(2 * i + 1, 0), 0.0); // angles stay in [0, pi]
}

TEST(Encode, ZeroNoiseGivesMean)
{
    const auto h = small_hyper();
    Rng rng(2);
    const auto p = ModelParams::initialize(3, h, rng);
    const double x[] = {0.3, -1.0, 2.0};
    const auto phi = encode_input(x);
    const auto s = encode(phi, p, Matrix::Zero(h.latent_dim, 1));
    EXPECT_EQ(s.z, s.mu);
    const auto again = encode(phi, p, Matrix::Zero(h.latent_dim, 1));
    EXPECT_EQ(again.mu, s.mu);
    EXPECT_EQ(again.logvar, s.logvar);
}

TEST(Encode, ZeroNetworkPassesNoiseThrough)
{
    const auto h = small_hyper();
    const auto p = ModelParams::zeros(2, h);
    Rng rng(3);
    Matrix eps(h.latent_dim, 1);
    for (Eigen::Index i = 0; i < eps.size(); ++i)
        eps(i, 0) = rng.normal();
    const double x[] = {1.0, 2.0};
    const auto s = encode(encode_input(x), p, eps);
    EXPECT_TRUE(s.mu.isZero(0));
    EXPECT_TRUE(s.logvar.isZero(0));
    EXPECT_EQ(s.z, eps);
}

TEST(Encode, Reparameterization)
{
    const auto h = small_hyper();
    Rng rng(4);
    const auto p = ModelParams::initialize(2, h, rng);
    Matrix eps(h.latent_dim, 1);
    for (Eigen::Index i = 0; i < eps.size(); ++i)
        eps(i, 0) = rng.normal();
    const double x[] = {0.1, 0.2};
    const auto s = encode(encode_input(x), p, eps);
    for (Eigen::Index i = 0; i < eps.size(); ++i)
        EXPECT_DOUBLE_EQ(s.z(i, 0), s.mu(i, 0) + std::exp(s.logvar(i, 0) / 2) * eps(i, 0));
}

TEST(Encode, ShapeMismatch)
{
    const auto h = small_hyper();
    const auto p = ModelParams::zeros(2, h);
    EXPECT_THROW(encode(Matrix::Zero(3, 1), p, Matrix::Zero(h.latent_dim, 1)), ConfigError);
    EXPECT_THROW(encode(Matrix::Zero(4, 1), p, Matrix::Zero(3, 1)), ConfigError);
}

TEST(Kl, Examples)
{
    EXPECT_EQ(kl_divergence(Matrix::Zero(4, 1), Matrix::Zero(4, 1)), 0.0);
    EXPECT_DOUBLE_EQ(kl_divergence(column({1.0}), column({0.0})), 0.5);
    // 0.5 * (0 + e^1 - 1 - 1)
    EXPECT_DOUBLE_EQ(kl_divergence(column({0.0}), column({1.0})), 0.5 * (std::exp(1.0) - 2.0));
    EXPECT_THROW(kl_divergence(Matrix::Zero(2, 1), Matrix::Zero(3, 1)), ConfigError);
}

TEST(Kl, NonNegativeAndZeroOnlyAtPrior)
{
    Rng rng(5);
    for (int i = 0; i < 2000; ++i) {
        const auto mu = column({rng.normal(0, 3), rng.normal(0, 3)});
        const auto lv = column({rng.normal(0, 5), rng.normal(0, 5)});
        const double kl = kl_divergence(mu, lv);
        ASSERT_GE(kl, 0.0);
        ASSERT_GT(kl, 0.0);
    }
}

TEST(Decode, ShapesAndZeros)
{
    const auto h = small_hyper();
    const auto zero = ModelParams::zeros(3, h);
    const Matrix z = Matrix::Constant(h.latent_dim, 1, 0.7);
    const auto r = decode(z, zero);
    EXPECT_EQ(r.rows(), 6);
    EXPECT_TRUE(r.isZero(0));
    Rng rng(6);
    const auto p = ModelParams::initialize(3, h, rng);
    EXPECT_EQ(decode(z, p), decode(z, p));
    EXPECT_EQ(decode(z, p).rows(), 6);
    EXPECT_THROW(decode(Matrix::Zero(3, 1), p), ConfigError);
}

TEST(Transformer, AttentionRowsAreDistributions)
{
    Rng rng(7);
    for (int heads : {1, 2, 4}) {
        HyperParams h;
        h.latent_dim = 12;
        h.token_count = 3;
        h.head_count = heads;
        h.n_layers = 2;
        if (h.embed_dim() % heads != 0)
            continue;
        const auto p = ModelParams::initialize(2, h, rng);
        Matrix z(h.latent_dim, 1);
        for (Eigen::Index i = 0; i < z.size(); ++i)
            z(i, 0) = rng.normal(0, 3);
        TransformerTrace tr;
        transformer_forward(z, p, heads, &tr);
        ASSERT_EQ(tr.blocks.size(), 2u);
        for (const auto& b : tr.blocks)
            for (const auto& a : b.attn) {
                ASSERT_EQ(a.rows(), 3);
                for (Eigen::Index r = 0; r < a.rows(); ++r) {
                    EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-9);
                    EXPECT_GE(a.row(r).minCoeff(), 0.0);
                }
            }
    }
}

TEST(Transformer, SingleTokenAttendsToItself)
{
    HyperParams h;
    h.latent_dim = 4;
    h.token_count = 1;
    h.head_count = 2;
    Rng rng(8);
    const auto p = ModelParams::initialize(2, h, rng);
    const auto z = column({0.5, -0.2, 0.1, 0.9});
    TransformerTrace tr;
    const auto q = transformer_forward(z, p, h.head_count, &tr);
    for (const auto& a : tr.blocks[0].attn) {
        ASSERT_EQ(a.size(), 1);
        EXPECT_EQ(a(0, 0), 1.0);
    }
    // With a single key the attention output is the value projection of the token itself.
    const Matrix x = z.transpose() + p.positional;
    const auto& b = tr.blocks[0];
    EXPECT_TRUE(b.concat.isApprox(x * p.blocks[0].value, 1e-12));
    EXPECT_EQ(q.q.rows(), 4);
}

TEST(Transformer, PoolingIsPermutationInvariantWithoutPositions)
{
    HyperParams h;
    h.latent_dim = 9;
    h.token_count = 3;
    h.head_count = 1;
    h.n_layers = 2;
    Rng rng(9);
    auto p = ModelParams::initialize(2, h, rng);
    p.positional.setZero();
    const auto z = column({0.1, 0.2, -0.7, 1.1, 0.4, -0.3, 0.8, 0.0, -1.2});
    const auto base = transformer_forward(z, p, 1);
    const int perms[][3] = {{0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (const auto& perm : perms) {
        Matrix zp(9, 1);
        for (int t = 0; t < 3; ++t)
            zp.middleRows(3 * t, 3) = z.middleRows(3 * perm[t], 3);
        const auto q = transformer_forward(zp, p, 1);
        for (Eigen::Index i = 0; i < q.q.size(); ++i)
            EXPECT_NEAR(q.q(i, 0), base.q(i, 0), 1e-12);
    }
}

TEST(Transformer, PositionsMakeOrderMatter)
{
    HyperParams h;
    h.latent_dim = 9;
    h.token_count = 3;
    h.head_count = 1;
    Rng rng(10);
    const auto p = ModelParams::initialize(2, h, rng);
    const auto z = column({0.1, 0.2, -0.7, 1.1, 0.4, -0.3, 0.8, 0.0, -1.2});
    Matrix swapped = z;
    swapped.middleRows(0, 3) = z.middleRows(6, 3);
    swapped.middleRows(6, 3) = z.middleRows(0, 3);
    EXPECT_FALSE(transformer_forward(z, p, 1).q.isApprox(transformer_forward(swapped, p, 1).q, 1e-6));
}

TEST(Transformer, ShapeErrors)
{
    HyperParams h;
    const auto p = ModelParams::zeros(2, h);
    EXPECT_THROW(transformer_forward(Matrix::Zero(5, 1), p, h.head_count), ConfigError);
    EXPECT_THROW(transformer_forward(Matrix::Zero(8, 1), p, 3), ConfigError);
}

TEST(Predict, Logistic)
{
    HyperParams h;
    auto p = ModelParams::zeros(2, h);
    ContextFeatures q{Matrix::Zero(h.embed_dim(), 1)};
    const auto half = predict(q, p);
    EXPECT_EQ(half.probability, 0.5);
    EXPECT_EQ(half.label, 1);
    p.head_b(0, 0) = 20;
    const auto high = predict(q, p);
    EXPECT_GT(high.probability, 0.999);
    EXPECT_EQ(high.label, 1);
    for (double logit = -30; logit <= 30; logit += 0.25) {
        const auto pr = Prediction::from_logit(logit);
        ASSERT_GT(pr.probability, 0.0);
        ASSERT_LT(pr.probability, 1.0);
        ASSERT_EQ(pr.label == 1, pr.probability >= 0.5);
    }
}

TEST(Loss, ChanceLevelIsLn2)
{
    HyperParams h;
    h.kl_weight = 0;
    h.recon_weight = 0;
    h.l2_reg = 0;
    const auto p = ModelParams::zeros(2, h);
    auto rp = oracle::random_problem(h, 2, 8, 11);
    EXPECT_NEAR(loss(rp.batch, p, h, rp.eps), std::numbers::ln2, 1e-15);
}

TEST(Loss, PerfectPredictionApproachesZero)
{
    HyperParams h;
    h.kl_weight = 0;
    h.recon_weight = 0;
    h.l2_reg = 0;
    auto p = ModelParams::zeros(2, h);
    auto rp = oracle::random_problem(h, 2, 6, 12);
    for (auto& y : rp.batch.labels)
        y = 1;
    double previous = loss(rp.batch, p, h, rp.eps);
    for (double b : {2.0, 5.0, 10.0, 20.0, 40.0}) {
        p.head_b(0, 0) = b;
        const double l = loss(rp.batch, p, h, rp.eps);
        EXPECT_LT(l, previous);
        previous = l;
    }
    EXPECT_LT(previous, 1e-15);
}

TEST(Loss, L2PenaltyStrictlyIncreases)
{
    auto h = small_hyper();
    auto rp = oracle::random_problem(h, 3, 8, 13);
    h.l2_reg = 0;
    const double without = loss(rp.batch, rp.params, h, rp.eps);
    h.l2_reg = 1e-3;
    const double with = loss(rp.batch, rp.params, h, rp.eps);
    EXPECT_GT(with, without);
    const auto parts = loss_parts(rp.batch, rp.params, h, rp.eps);
    EXPECT_DOUBLE_EQ(parts.total - parts.l2, without);
    EXPECT_GE(parts.kl, 0.0);
    EXPECT_GE(parts.recon, 0.0);
}

TEST(Loss, BatchOrderInvariantWithoutL2)
{
    auto h = small_hyper();
    h.l2_reg = 0;
    auto rp = oracle::random_problem(h, 3, 8, 14);
    Batch rev = rp.batch;
    Matrix eps = rp.eps;
    for (Eigen::Index r = 0; r < 8; ++r) {
        rev.features.row(r) = rp.batch.features.row(7 - r);
        rev.labels[static_cast<std::size_t>(r)] = rp.batch.labels[static_cast<std::size_t>(7 - r)];
        eps.row(r) = rp.eps.row(7 - r);
    }
    EXPECT_NEAR(loss(rev, rp.params, h, eps), loss(rp.batch, rp.params, h, rp.eps), 1e-13);
}

TEST(Loss, BatchErrors)
{
    auto h = small_hyper();
    auto rp = oracle::random_problem(h, 3, 4, 15);
    Batch empty;
    empty.features.resize(0, 3);
    EXPECT_THROW(loss(empty, rp.params, h, Matrix::Zero(0, h.latent_dim)), ConfigError);
    EXPECT_THROW(loss(rp.batch, rp.params, h, Matrix::Zero(4, 3)), ConfigError);
    rp.batch.labels.pop_back();
    EXPECT_THROW(loss(rp.batch, rp.params, h, rp.eps), ConfigError);
}

TEST(Gradient, MatchesFiniteDifferences)
{
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto h = small_hyper();
        const auto rp = oracle::random_problem(h, 3, 8, seed);
        for (const auto& g : oracle::gradient_check(rp.batch, rp.params, h, rp.eps)) {
            EXPECT_LT(g.relative, 1e-4) << g.name << " seed " << seed;
            EXPECT_EQ(g.bad_entries, 0u) << g.name << " seed " << seed;
        }
    }
}

TEST(Gradient, MatchesFiniteDifferencesAcrossShapes)
{
    struct Shape {
        int latent, tokens, heads, layers;
        double recon;
    };
    for (const auto s : {Shape{4, 1, 1, 1, 0.0}, Shape{12, 3, 2, 1, 0.2}, Shape{12, 4, 3, 3, 1.0}}) {
        HyperParams h = small_hyper();
        h.latent_dim = s.latent;
        h.token_count = s.tokens;
        h.head_count = s.heads;
        h.n_layers = s.layers;
        h.recon_weight = s.recon;
        const auto rp = oracle::random_problem(h, 2, 5, 99);
        for (const auto& g : oracle::gradient_check(rp.batch, rp.params, h, rp.eps))
            EXPECT_LT(g.relative, 1e-4) << g.name << " latent " << s.latent;
    }
}

TEST(Gradient, LossValueMatchesLoss)
{
    const auto h = small_hyper();
    const auto rp = oracle::random_problem(h, 3, 8, 16);
    EXPECT_DOUBLE_EQ(gradient(rp.batch, rp.params, h, rp.eps).loss, loss(rp.batch, rp.params, h, rp.eps));
}

TEST(Gradient, HeadIsStationaryAtPerfectPrediction)
{
    HyperParams h;
    h.kl_weight = 0;
    h.recon_weight = 0;
    h.l2_reg = 0;
    auto rp = oracle::random_problem(h, 2, 6, 17);
    for (auto& y : rp.batch.labels)
        y = 1;
    rp.params.head_b(0, 0) = 40;
    const auto g = gradient(rp.batch, rp.params, h, rp.eps).grad;
    EXPECT_LT(g.head_w.cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT(std::abs(g.head_b(0, 0)), 1e-15);
}

TEST(Gradient, L2TermIsTwiceLambdaW)
{
    auto h = small_hyper();
    const auto rp = oracle::random_problem(h, 3, 8, 18);
    h.l2_reg = 0;
    const auto plain = gradient(rp.batch, rp.params, h, rp.eps).grad;
    h.l2_reg = 0.01;
    const auto reg = gradient(rp.batch, rp.params, h, rp.eps).grad;
    const auto a = reg.tensors(), b = plain.tensors(), w = rp.params.tensors();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Matrix expected = w[i].regularized ? Matrix(2.0 * 0.01 * *w[i].value)
                                                 : Matrix(Matrix::Zero(w[i].value->rows(), w[i].value->cols()));
        EXPECT_TRUE((*a[i].value - *b[i].value - expected).cwiseAbs().maxCoeff() < 1e-15) << a[i].name;
    }
}

TEST(Gradient, DecoderIdleWithoutReconstruction)
{
    auto h = small_hyper();
    h.recon_weight = 0;
    h.l2_reg = 0;
    const auto rp = oracle::random_problem(h, 3, 8, 19);
    const auto g = gradient(rp.batch, rp.params, h, rp.eps).grad;
    EXPECT_TRUE(g.dec1_w.isZero(0));
    EXPECT_TRUE(g.dec2_w.isZero(0));
    EXPECT_TRUE(g.dec2_b.isZero(0));
}

TEST(Train, ZeroEpochs)
{
    auto h = HyperParams{};
    h.epochs = 0;
    const auto data = toy_blobs();
    const auto m = train(data, h, 3);
    EXPECT_TRUE(m.loss_history.empty());
    EXPECT_TRUE(m.params.all_finite());
    EXPECT_EQ(m.params, train(data, h, 3).params);
    EXPECT_EQ(m.norm, data.norm);
}

TEST(Train, DeterministicUnderSeed)
{
    auto h = HyperParams{};
    h.epochs = 3;
    const auto data = toy_blobs();
    const auto a = train(data, h, 4);
    const auto b = train(data, h, 4);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.loss_history, b.loss_history);
    EXPECT_EQ(a.loss_history.size(), 3u);
    EXPECT_NE(a.params, train(data, h, 5).params);
}

TEST(Train, LearnsSeparableBlobs)
{
    const auto data = toy_blobs();
    const auto m = train(data, HyperParams{}, 6);
    ASSERT_EQ(m.loss_history.size(), static_cast<std::size_t>(HyperParams{}.epochs));
    EXPECT_LT(m.loss_history.back(), m.loss_history.front());
    std::size_t correct = 0;
    for (const auto& r : data.data.records)
        correct += infer_normalized(m, r.features).label == r.label ? 1 : 0;
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(data.data.size()), 0.9);
}

TEST(Train, DivergenceReportsEpoch)
{
    auto h = HyperParams{};
    h.learning_rate = 1e12;
    try {
        train(toy_blobs(), h, 7);
        FAIL() << "expected divergence";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    }
}

TEST(Train, NeedsBothClasses)
{
    auto data = toy_blobs();
    std::erase_if(data.data.records, [](const MetricRecord& r) { return r.label == 1; });
    EXPECT_THROW(train(data, HyperParams{}, 1), DataError);
}

TEST(Infer, DeterministicAndThresholded)
{
    auto h = HyperParams{};
    h.epochs = 5;
    const auto m = train(toy_blobs(), h, 8);
    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
        const double x[] = {rng.normal(12, 4), rng.normal(55, 10)};
        const auto a = infer(m, x);
        const auto b = infer(m, x);
        ASSERT_EQ(a.probability, b.probability);
        ASSERT_EQ(a.label == 1, a.probability >= 0.5);
    }
    const double wrong[] = {1.0};
    EXPECT_THROW(infer(m, wrong), DataError);
}

TEST(Checkpoint, RoundTripIsBitwise)
{
    auto h = HyperParams{};
    h.epochs = 4;
    h.n_layers = 2;
    const auto m = train(toy_blobs(), h, 10);
    std::stringstream buf;
    save_checkpoint(buf, m);
    EXPECT_EQ(buf.str().rfind("sdpm-v1\n", 0), 0u);
    const auto back = load_checkpoint(buf, "mem");
    EXPECT_EQ(back.params, m.params);
    EXPECT_EQ(back.hyper, m.hyper);
    EXPECT_EQ(back.norm, m.norm);
    EXPECT_EQ(back.schema, m.schema);
    EXPECT_EQ(back.loss_history, m.loss_history);
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        const double x[] = {rng.normal(12, 4), rng.normal(55, 10)};
        ASSERT_EQ(infer(back, x).probability, infer(m, x).probability);
    }
    std::stringstream again;
    save_checkpoint(again, back);
    EXPECT_EQ(again.str(), buf.str());
}

TEST(Checkpoint, RejectsDamage)
{
    auto h = HyperParams{};
    h.epochs = 1;
    const auto m = train(toy_blobs(), h, 12);
    std::stringstream buf;
    save_checkpoint(buf, m);
    const auto text = buf.str();

    std::istringstream wrong_header("sdpm-v0\n" + text.substr(text.find('\n') + 1));
    EXPECT_THROW(load_checkpoint(wrong_header, "x"), DataError);
    std::istringstream truncated(text.substr(0, text.size() / 2));
    EXPECT_THROW(load_checkpoint(truncated, "x"), DataError);
    EXPECT_THROW(load_checkpoint(std::string("/nonexistent/model.sdpm")), DataError);
}
