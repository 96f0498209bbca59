#pragma once

// Adaptive differential evolution (DE/rand/1/bin) over a normalized box
// [0,1]^d, maximizing a fitness function. F and CR are sampled per member
// around running means that follow the successful values of each generation
// (Lehmer mean for F, arithmetic mean for CR).

#include <sdp/error.hpp>
#include <sdp/rng.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace sdp {

enum class Scale { linear, log };
enum class Kind { continuous, integer };

struct Dimension {
    std::string name;
    double lower = 0.0;
    double upper = 1.0;
    Scale scale = Scale::linear;
    Kind kind = Kind::continuous;

    bool operator==(const Dimension&) const = default;
};

struct SearchSpace {
    std::vector<Dimension> dims;

    std::size_t size() const noexcept { return dims.size(); }

    void validate() const
    {
        if (dims.empty())
            throw ConfigError("search space has no dimensions");
        std::set<std::string> names;
        for (const auto& d : dims) {
            if (!names.insert(d.name).second)
                throw ConfigError("search space: duplicate dimension '" + d.name + "'");
            if (!(d.lower < d.upper))
                throw ConfigError("search space: '" + d.name + "' needs lower < upper");
            if (d.scale == Scale::log && !(d.lower > 0.0))
                throw ConfigError("search space: log-scale '" + d.name + "' needs lower > 0");
        }
    }

    bool operator==(const SearchSpace&) const = default;
};

using NamedValues = std::vector<std::pair<std::string, double>>;

/// Maps a normalized genome to named values. Integer dims round half-up after
/// scaling and are clamped into their bounds.
inline NamedValues decode(std::span<const double> genome, const SearchSpace& space)
{
    if (genome.size() != space.size())
        throw ConfigError("decode: genome has " + std::to_string(genome.size()) +
                          " genes, space has " + std::to_string(space.size()) + " dims");
    NamedValues out;
    out.reserve(space.size());
    for (std::size_t i = 0; i < genome.size(); ++i) {
        const double g = genome[i];
        if (!(g >= 0.0 && g <= 1.0))
            throw ConfigError("decode: gene " + std::to_string(i) + " outside [0,1]");
        const auto& d = space.dims[i];
        double v = d.scale == Scale::log
                       ? std::exp(std::log(d.lower) + g * (std::log(d.upper) - std::log(d.lower)))
                       : d.lower + g * (d.upper - d.lower);
        if (g == 0.0)
            v = d.lower;
        else if (g == 1.0)
            v = d.upper;
        if (d.kind == Kind::integer)
            v = std::floor(v + 0.5);
        out.emplace_back(d.name, std::clamp(v, d.lower, d.upper));
    }
    return out;
}

struct Candidate {
    std::vector<double> genome;
    std::optional<double> fitness;
};

struct Population {
    std::vector<Candidate> members;
    int generation = 0;
};

struct AdaptState {
    double mu_f = 0.5;
    double mu_cr = 0.5;
    std::vector<double> success_f;
    std::vector<double> success_cr;
    std::size_t success_count = 0;
};

struct AdeConfig {
    int pop_size = 20;
    int max_generations = 30;
    double c_adapt = 0.1;
    double init_mu_f = 0.5;
    double init_mu_cr = 0.5;
    double f_scale = 0.1;  // Cauchy scale for F draws; 0 fixes F at mu_f
    double cr_sigma = 0.1; // normal sigma for CR draws; 0 fixes CR at mu_cr
    int stagnation_generations = 0; // 0 disables
    int threads = 1;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (pop_size < 4)
            throw ConfigError("ade.pop_size must be >= 4 (target plus three distinct donors)");
        if (max_generations < 1)
            throw ConfigError("ade.max_generations must be >= 1");
        if (!(c_adapt >= 0.0 && c_adapt <= 1.0))
            throw ConfigError("ade.c_adapt must be in [0, 1]");
        if (!(init_mu_f > 0.0 && init_mu_f <= 1.0))
            throw ConfigError("ade.init_mu_f must be in (0, 1]");
        if (!(init_mu_cr >= 0.0 && init_mu_cr <= 1.0))
            throw ConfigError("ade.init_mu_cr must be in [0, 1]");
        if (!(f_scale >= 0.0) || !(cr_sigma >= 0.0))
            throw ConfigError("ade.f_scale and ade.cr_sigma must be >= 0");
        if (stagnation_generations < 0)
            throw ConfigError("ade.stagnation_generations must be >= 0");
        if (threads < 1)
            throw ConfigError("ade.threads must be >= 1");
    }
};

struct GenerationRecord {
    int generation = 0;
    double best_fitness = 0.0;
    double mu_f = 0.0;
    double mu_cr = 0.0;
    std::size_t success_count = 0;
};

struct OptimizationResult {
    std::vector<double> best_genome;
    NamedValues best_decoded;
    double best_fitness = 0.0;
    std::vector<GenerationRecord> history;
    Population final_population;
};

inline Population init_population(const SearchSpace& space, const AdeConfig& config, Rng& rng)
{
    config.validate();
    Population pop;
    pop.members.resize(static_cast<std::size_t>(config.pop_size));
    for (auto& m : pop.members) {
        m.genome.resize(space.size());
        for (double& g : m.genome)
            g = rng.uniform();
    }
    return pop;
}

/// x_j = Y_s1 + F (Y_s2 - Y_s3) with s1, s2, s3, j pairwise distinct; clamped to [0,1].
inline std::vector<double> mutate(const Population& pop, std::size_t target, double f, Rng& rng,
                                  std::array<std::size_t, 3>* donors = nullptr)
{
    const std::size_t n = pop.members.size();
    if (n < 4)
        throw ConfigError("mutate: population needs at least 4 members");
    std::size_t s1 = 0, s2 = 0, s3 = 0;
    do s1 = rng.index(n); while (s1 == target);
    do s2 = rng.index(n); while (s2 == target || s2 == s1);
    do s3 = rng.index(n); while (s3 == target || s3 == s1 || s3 == s2);
    if (donors)
        *donors = {s1, s2, s3};

    const auto& a = pop.members[s1].genome;
    const auto& b = pop.members[s2].genome;
    const auto& c = pop.members[s3].genome;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        out[i] = std::clamp(a[i] + f * (b[i] - c[i]), 0.0, 1.0);
    return out;
}

/// Binomial crossover: gene i comes from the mutant when rand_i <= CR or i is
/// the forced index (one per call), otherwise from the target.
inline std::vector<double> crossover(std::span<const double> target, std::span<const double> mutant,
                                     double cr, Rng& rng)
{
    if (target.size() != mutant.size())
        throw ConfigError("crossover: target and mutant lengths differ");
    std::vector<double> trial(target.begin(), target.end());
    if (trial.empty())
        return trial;
    const std::size_t forced = rng.index(trial.size());
    for (std::size_t i = 0; i < trial.size(); ++i) {
        const double r = rng.uniform();
        if (i == forced || r <= cr)
            trial[i] = mutant[i];
    }
    return trial;
}

/// Greedy selection under maximization; ties go to the trial.
inline bool select(double trial_fitness, double target_fitness)
{
    if (!std::isfinite(trial_fitness) || !std::isfinite(target_fitness))
        throw NumericError("select: non-finite fitness");
    return trial_fitness >= target_fitness;
}

inline double sample_f(const AdaptState& state, const AdeConfig& config, Rng& rng)
{
    if (config.f_scale == 0.0)
        return state.mu_f;
    double f = 0.0;
    do f = rng.cauchy(state.mu_f, config.f_scale); while (!(f > 0.0));
    return std::min(f, 1.0);
}

inline double sample_cr(const AdaptState& state, const AdeConfig& config, Rng& rng)
{
    if (config.cr_sigma == 0.0)
        return state.mu_cr;
    return std::clamp(rng.normal(state.mu_cr, config.cr_sigma), 0.0, 1.0);
}

/// End-of-generation update. Without successes the means stay put.
inline AdaptState adapt(AdaptState state, const AdeConfig& config)
{
    if (!state.success_f.empty()) {
        double sum = 0.0, sum_sq = 0.0;
        for (double f : state.success_f) {
            sum += f;
            sum_sq += f * f;
        }
        double cr_sum = 0.0;
        for (double cr : state.success_cr)
            cr_sum += cr;
        const double c = config.c_adapt;
        state.mu_f = (1.0 - c) * state.mu_f + c * (sum_sq / sum);
        state.mu_cr = (1.0 - c) * state.mu_cr +
                      c * (cr_sum / static_cast<double>(state.success_cr.size()));
    }
    state.mu_f = std::clamp(state.mu_f, 0.1, 1.0);
    state.mu_cr = std::clamp(state.mu_cr, 0.0, 1.0);
    state.success_f.clear();
    state.success_cr.clear();
    state.success_count = 0;
    return state;
}

/// Optional instrumentation for tests and tooling.
struct AdeHooks {
    std::function<void(const Population&)> on_generation;                      // after selection
    std::function<void(std::size_t, const std::array<std::size_t, 3>&)> on_donors; // per mutation
};

namespace detail {

/// Evaluates genomes[i] for all i; serial and threaded runs give the same
/// results as long as the objective is pure.
template <typename Objective>
std::vector<double> evaluate_all(Objective& objective, const std::vector<std::vector<double>>& genomes,
                                 int threads, int generation)
{
    std::vector<double> fitness(genomes.size(), 0.0);
    std::vector<std::exception_ptr> errors(genomes.size());
    auto work = [&](std::size_t i) {
        try {
            fitness[i] = static_cast<double>(objective(std::span<const double>(genomes[i])));
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), genomes.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < genomes.size(); ++i)
            work(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < genomes.size(); i = next++)
                    work(i);
            });
    }
    for (std::size_t i = 0; i < genomes.size(); ++i) {
        if (errors[i])
            std::rethrow_exception(errors[i]);
        if (!std::isfinite(fitness[i]))
            throw NumericError("objective returned a non-finite value at generation " +
                               std::to_string(generation) + ", member " + std::to_string(i));
    }
    return fitness;
}

inline std::size_t best_index(const Population& pop)
{
    std::size_t best = 0;
    for (std::size_t i = 1; i < pop.members.size(); ++i)
        if (*pop.members[i].fitness > *pop.members[best].fitness)
            best = i;
    return best;
}

} // namespace detail

/// Maximizes `objective` (callable as double(std::span<const double>)) over
/// the normalized box. Trials of one generation are all generated, then
/// evaluated, then selected in member order.
template <typename Objective>
OptimizationResult optimize(Objective&& objective, const SearchSpace& space,
                            const AdeConfig& config, const AdeHooks& hooks = {})
{
    space.validate();
    config.validate();
    Rng rng(config.seed);
    Population pop = init_population(space, config, rng);
    {
        std::vector<std::vector<double>> genomes;
        for (const auto& m : pop.members)
            genomes.push_back(m.genome);
        const auto fit = detail::evaluate_all(objective, genomes, config.threads, 0);
        for (std::size_t i = 0; i < fit.size(); ++i)
            pop.members[i].fitness = fit[i];
    }

    AdaptState state;
    state.mu_f = config.init_mu_f;
    state.mu_cr = config.init_mu_cr;
    OptimizationResult result;
    double best = *pop.members[detail::best_index(pop)].fitness;
    int stale = 0;
    const std::size_t n = pop.members.size();
    std::vector<double> f_used(n), cr_used(n);
    std::vector<std::vector<double>> trials(n);

    for (int gen = 1; gen <= config.max_generations; ++gen) {
        for (std::size_t j = 0; j < n; ++j) {
            f_used[j] = sample_f(state, config, rng);
            cr_used[j] = sample_cr(state, config, rng);
            std::array<std::size_t, 3> donors{};
            const auto mutant = mutate(pop, j, f_used[j], rng, &donors);
            if (hooks.on_donors)
                hooks.on_donors(j, donors);
            trials[j] = crossover(pop.members[j].genome, mutant, cr_used[j], rng);
        }
        const auto trial_fit = detail::evaluate_all(objective, trials, config.threads, gen);
        for (std::size_t j = 0; j < n; ++j) {
            if (select(trial_fit[j], *pop.members[j].fitness)) {
                pop.members[j] = {std::move(trials[j]), trial_fit[j]};
                state.success_f.push_back(f_used[j]);
                state.success_cr.push_back(cr_used[j]);
                ++state.success_count;
            }
        }
        pop.generation = gen;
        if (hooks.on_generation)
            hooks.on_generation(pop);

        const double gen_best = *pop.members[detail::best_index(pop)].fitness;
        stale = gen_best > best ? 0 : stale + 1;
        best = std::max(best, gen_best);
        const std::size_t successes = state.success_count;
        state = adapt(std::move(state), config);
        result.history.push_back({gen, best, state.mu_f, state.mu_cr, successes});
        if (config.stagnation_generations > 0 && stale >= config.stagnation_generations)
            break;
    }

    const auto& winner = pop.members[detail::best_index(pop)];
    result.best_genome = winner.genome;
    result.best_decoded = decode(winner.genome, space);
    result.best_fitness = *winner.fitness;
    result.final_population = std::move(pop);
    return result;
}

/// History rows: generation,best_fitness,mu_f,mu_cr,success_count.
inline void write_history_csv(std::ostream& out, const std::vector<GenerationRecord>& history)
{
    out << "generation,best_fitness,mu_f,mu_cr,success_count\n";
    char buf[160];
    for (const auto& h : history) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%zu\n", h.generation, h.best_fitness,
                      h.mu_f, h.mu_cr, h.success_count);
        out << buf;
    }
}

} // namespace sdp
