#pragma once

// Oracles shared by the unit tests and the acceptance runner. Nothing here
// calls into the code under test beyond the public types and Rng.

#include <sdp/ade.hpp>
#include <sdp/dataset.hpp>
#include <sdp/model.hpp>
#include <sdp/rng.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace sdp::oracle {

struct GroupError {
    std::string name;
    double relative = 0.0;     // ||analytic - numeric|| / max(||analytic||, ||numeric||)
    std::size_t bad_entries = 0; // entries outside 1e-4 relative (with a 1e-7 absolute floor)
};

/// Central finite differences of `loss` for every parameter entry.
inline std::vector<GroupError> gradient_check(const Batch& batch, ModelParams p, const HyperParams& h,
                                              const Matrix& eps, double step = 1e-5)
{
    const auto analytic = gradient(batch, p, h, eps).grad;
    const auto grads = analytic.tensors();
    auto params = p.tensors();
    std::vector<GroupError> out;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix& w = *params[k].value;
        Matrix numeric(w.rows(), w.cols());
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            const double saved = w.data()[i];
            w.data()[i] = saved + step;
            const double up = loss(batch, p, h, eps);
            w.data()[i] = saved - step;
            const double down = loss(batch, p, h, eps);
            w.data()[i] = saved;
            numeric.data()[i] = (up - down) / (2.0 * step);
        }
        const Matrix& a = *grads[k].value;
        GroupError e{params[k].name, 0.0, 0};
        const double scale = std::max({a.norm(), numeric.norm(), 1e-12});
        e.relative = (a - numeric).norm() / scale;
        for (Eigen::Index i = 0; i < a.size(); ++i) {
            const double x = a.data()[i], y = numeric.data()[i];
            if (std::abs(x - y) > 1e-4 * std::max(std::abs(x), std::abs(y)) + 1e-7)
                ++e.bad_entries;
        }
        out.push_back(e);
    }
    return out;
}

/// A random batch of normalized-looking features with both labels and noise.
struct RandomProblem {
    Batch batch;
    Matrix eps;
    ModelParams params;
};

inline RandomProblem random_problem(const HyperParams& h, std::size_t arity, Eigen::Index rows,
                                    std::uint64_t seed)
{
    Rng rng(seed);
    RandomProblem rp;
    rp.params = ModelParams::initialize(arity, h, rng);
    // Move away from the symmetric initialization so every path carries signal.
    for (auto& t : rp.params.tensors())
        for (Eigen::Index i = 0; i < t.value->size(); ++i)
            t.value->data()[i] += 0.1 * rng.normal();
    rp.batch.features.resize(rows, static_cast<Eigen::Index>(arity));
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < rp.batch.features.cols(); ++c)
            rp.batch.features(r, c) = rng.normal();
        rp.batch.labels.push_back(static_cast<int>(r % 2));
    }
    rp.eps.resize(rows, h.latent_dim);
    for (Eigen::Index i = 0; i < rp.eps.size(); ++i)
        rp.eps.data()[i] = rng.normal();
    return rp;
}

/// Two-feature gaussian blobs: the first n * positive_fraction rows are
/// positive and shifted by `separation` standard deviations on both axes.
inline Dataset gaussian_blobs(int n, double positive_fraction, double separation, std::uint64_t seed)
{
    Rng rng(seed);
    Dataset ds{{{"loc", "cbo"}, "defect"}, {}};
    for (int i = 0; i < n; ++i) {
        const int y = i < n * positive_fraction ? 1 : 0;
        const double shift = y ? separation : 0.0;
        ds.records.push_back({{10 + 3 * (shift + rng.normal()), 50 + 8 * (shift + rng.normal())}, y,
                              Origin::real});
    }
    return ds;
}

/// Plain DE/rand/1/bin with fixed F and CR, written from the textbook
/// description. It consumes the random stream in the documented order:
/// initial genes; then per member: three donor indices by rejection, the
/// forced crossover index, one uniform per gene.
struct ClassicDe {
    std::vector<std::vector<double>> pop;
    std::vector<double> fit;
};

template <typename F>
std::vector<ClassicDe> classic_de(F&& f, std::size_t dims, std::size_t np, double weight, double cr,
                                  int generations, std::uint64_t seed)
{
    Rng rng(seed);
    ClassicDe state;
    state.pop.assign(np, std::vector<double>(dims));
    for (auto& x : state.pop)
        for (double& g : x)
            g = rng.uniform();
    for (const auto& x : state.pop)
        state.fit.push_back(f(x));
    std::vector<ClassicDe> trajectory{state};

    for (int g = 0; g < generations; ++g) {
        std::vector<std::vector<double>> trials(np);
        for (std::size_t j = 0; j < np; ++j) {
            std::size_t a, b, c;
            do a = rng.index(np); while (a == j);
            do b = rng.index(np); while (b == j || b == a);
            do c = rng.index(np); while (c == j || c == a || c == b);
            std::vector<double> v(dims);
            for (std::size_t i = 0; i < dims; ++i) {
                double m = state.pop[a][i] + weight * (state.pop[b][i] - state.pop[c][i]);
                v[i] = m < 0.0 ? 0.0 : (m > 1.0 ? 1.0 : m);
            }
            const std::size_t forced = rng.index(dims);
            trials[j] = state.pop[j];
            for (std::size_t i = 0; i < dims; ++i) {
                const double r = rng.uniform();
                if (i == forced || r <= cr)
                    trials[j][i] = v[i];
            }
        }
        for (std::size_t j = 0; j < np; ++j) {
            const double ft = f(trials[j]);
            if (ft >= state.fit[j]) {
                state.pop[j] = trials[j];
                state.fit[j] = ft;
            }
        }
        trajectory.push_back(state);
    }
    return trajectory;
}

} // namespace sdp::oracle
