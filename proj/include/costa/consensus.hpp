#ifndef COSTA_CONSENSUS_HPP
#define COSTA_CONSENSUS_HPP

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "common.hpp"
#include "inference.hpp"
#include "linalg.hpp"
#include "model.hpp"
#include "table.hpp"

/**
 * @file consensus.hpp
 * @brief Partitioned inference: sequential updating of coefficient and
 *        hyperparameter posteriors across data partitions, then a consensus
 *        merge of the random-effect posteriors.
 *
 * The data are split into partitions (whole time blocks, likelihood groups,
 * or plain observation chunks). Partition j is fitted with the coefficient
 * prior replaced by the stage j-1 coefficient posterior (full Gaussian) and
 * each free hyperparameter penalized by its stage j-1 moment-matched Gaussian
 * on the transformed scale. Random-effect posteriors are kept per partition
 * and combined afterwards, either marginally (precision weighting) or as a
 * multivariate Gaussian product with the shared prior counted once.
 */

namespace costa {

// ---------------------------------------------------------------------------
// Partition plans
// ---------------------------------------------------------------------------

enum class PartitionStrategy { TimeBlocks, LikelihoodGroups, ObservationChunks };

inline const char* to_string(PartitionStrategy s) {
    switch (s) {
        case PartitionStrategy::TimeBlocks: return "time-blocks";
        case PartitionStrategy::LikelihoodGroups: return "likelihood-groups";
        default: return "observation-chunks";
    }
}

/**
 * Assignment of every observation to exactly one partition. `assign` is
 * indexed [block][observation] and holds partition ids in [0, n_partitions).
 */
struct PartitionPlan {
    PartitionStrategy strategy = PartitionStrategy::ObservationChunks;
    int n_partitions = 0;
    std::vector<std::vector<int>> assign;
    std::string warning;   // set by planners for allowed-but-suspect requests

    void validate() const {
        require(n_partitions >= 2, "EmptyPartition",
                "a sequential scheme needs at least 2 partitions");
        std::vector<long> count(n_partitions, 0);
        for (const auto& blk : assign)
            for (int p : blk) {
                require(p >= 0 && p < n_partitions, "EmptyPartition",
                        "partition id " + std::to_string(p) + " out of range");
                ++count[p];
            }
        for (int p = 0; p < n_partitions; ++p)
            require(count[p] > 0, "EmptyPartition",
                    "partition " + std::to_string(p) + " holds no observations");
    }
};

/** Split the block-major observation sequence into n_p balanced chunks. */
inline PartitionPlan plan_observation_chunks(const std::vector<int>& block_sizes,
                                             int n_p) {
    long total = 0;
    for (int s : block_sizes) total += s;
    require(n_p >= 2, "EmptyPartition", "need at least 2 partitions");
    require(n_p <= total, "EmptyPartition",
            "more partitions than observations");
    PartitionPlan plan;
    plan.strategy = PartitionStrategy::ObservationChunks;
    plan.n_partitions = n_p;
    long g = 0;
    for (int s : block_sizes) {
        std::vector<int> a(s);
        for (int i = 0; i < s; ++i, ++g)
            a[i] = static_cast<int>(g * n_p / total);
        plan.assign.push_back(std::move(a));
    }
    if (n_p == total) plan.warning = "singleton partitions";
    plan.validate();
    return plan;
}

/**
 * Group whole time slices: observations carry an integer time index per
 * block; the distinct indices are split into n_p contiguous runs.
 */
inline PartitionPlan plan_time_blocks(const std::vector<std::vector<int>>& obs_time,
                                      int n_p) {
    require(n_p >= 2, "EmptyPartition", "need at least 2 partitions");
    std::set<int> distinct;
    for (const auto& blk : obs_time) distinct.insert(blk.begin(), blk.end());
    const long T = static_cast<long>(distinct.size());
    require(T >= n_p, "EmptyPartition",
            "fewer distinct time indices than partitions");
    std::map<int, int> part_of_time;
    long v = 0;
    for (int t : distinct) part_of_time[t] = static_cast<int>(v++ * n_p / T);
    PartitionPlan plan;
    plan.strategy = PartitionStrategy::TimeBlocks;
    plan.n_partitions = n_p;
    for (const auto& blk : obs_time) {
        std::vector<int> a(blk.size());
        for (size_t i = 0; i < blk.size(); ++i) a[i] = part_of_time[blk[i]];
        plan.assign.push_back(std::move(a));
    }
    if (T == n_p) plan.warning = "singleton partitions";
    plan.validate();
    return plan;
}

/** One partition per likelihood group; `group_of_block` maps block -> group. */
inline PartitionPlan plan_likelihood_groups(const std::vector<int>& group_of_block,
                                            const std::vector<int>& block_sizes) {
    require(group_of_block.size() == block_sizes.size(), "DimensionMismatch",
            "one group id per block required");
    int n_p = 0;
    for (int g : group_of_block) {
        require(g >= 0, "EmptyPartition", "negative group id");
        n_p = std::max(n_p, g + 1);
    }
    PartitionPlan plan;
    plan.strategy = PartitionStrategy::LikelihoodGroups;
    plan.n_partitions = n_p;
    for (size_t b = 0; b < block_sizes.size(); ++b)
        plan.assign.emplace_back(block_sizes[b], group_of_block[b]);
    plan.validate();
    return plan;
}

/** Plan file: one row per observation (block-major), columns obs,partition. */
inline void write_partition_plan(const std::string& path,
                                 const PartitionPlan& plan) {
    Table t;
    t.comments.push_back(std::string("strategy=") + to_string(plan.strategy));
    t.comments.push_back("n_partitions=" + std::to_string(plan.n_partitions));
    t.columns = {"obs", "partition"};
    long g = 0;
    for (const auto& blk : plan.assign)
        for (int p : blk) t.add_row({static_cast<double>(g++), static_cast<double>(p)});
    write_table_file(path, t);
}

inline PartitionPlan read_partition_plan(const std::string& path,
                                         const std::vector<int>& block_sizes) {
    const Table t = read_table_file(path);
    PartitionPlan plan;
    for (const auto& c : t.comments) {
        if (c.rfind("strategy=", 0) == 0) {
            const std::string v = c.substr(9);
            if (v == "time-blocks") plan.strategy = PartitionStrategy::TimeBlocks;
            else if (v == "likelihood-groups")
                plan.strategy = PartitionStrategy::LikelihoodGroups;
        }
    }
    long total = 0;
    for (int s : block_sizes) total += s;
    require(t.nrow() == total, "DimensionMismatch",
            "plan rows do not match observation count");
    const std::vector<double> part = t.column("partition");
    int n_p = 0;
    for (double p : part) n_p = std::max(n_p, static_cast<int>(p) + 1);
    plan.n_partitions = n_p;
    long g = 0;
    for (int s : block_sizes) {
        std::vector<int> a(s);
        for (int i = 0; i < s; ++i, ++g) a[i] = static_cast<int>(part[g]);
        plan.assign.push_back(std::move(a));
    }
    plan.validate();
    return plan;
}

// ---------------------------------------------------------------------------
// Partition sub-models
// ---------------------------------------------------------------------------

namespace detail {

/** Row-subset a sparse matrix to the given (ordered) row list. */
inline Eigen::SparseMatrix<double> take_rows(const Eigen::SparseMatrix<double>& M,
                                             const std::vector<int>& rows) {
    std::vector<Eigen::Triplet<double>> trip;
    std::vector<int> pos(M.rows(), -1);
    for (size_t r = 0; r < rows.size(); ++r) pos[rows[r]] = static_cast<int>(r);
    for (int k = 0; k < M.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(M, k); it; ++it)
            if (pos[it.row()] >= 0)
                trip.emplace_back(pos[it.row()], static_cast<int>(it.col()),
                                  it.value());
    Eigen::SparseMatrix<double> out(static_cast<int>(rows.size()), M.cols());
    out.setFromTriplets(trip.begin(), trip.end());
    out.makeCompressed();
    return out;
}

} // namespace detail

/**
 * The sub-model holding only partition `part`'s observations. Every block is
 * kept (possibly empty) so the coefficient and hyperparameter registries,
 * and hence the latent layout, are identical across partitions.
 */
inline ModelSpec partition_spec(const ModelSpec& spec, const PartitionPlan& plan,
                                int part) {
    require(plan.assign.size() == spec.blocks.size(), "DimensionMismatch",
            "plan blocks do not match model blocks");
    ModelSpec out = spec;
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        const ObsBlockSpec& src = spec.blocks[b];
        ObsBlockSpec& dst = out.blocks[b];
        require(static_cast<int>(plan.assign[b].size()) == src.n_obs(),
                "DimensionMismatch",
                "block " + src.name + ": plan length != observation count");
        std::vector<int> obs, rows;
        const int rpo = src.rows_per_obs();
        for (int i = 0; i < src.n_obs(); ++i)
            if (plan.assign[b][i] == part) {
                obs.push_back(i);
                for (int d = 0; d < rpo; ++d) rows.push_back(i * rpo + d);
            }
        const int m = static_cast<int>(obs.size());
        if (src.family == Family::Dirichlet) {
            dst.ycomp.resize(m, src.ycomp.cols());
            for (int i = 0; i < m; ++i) dst.ycomp.row(i) = src.ycomp.row(obs[i]);
        } else {
            dst.y.resize(m);
            for (int i = 0; i < m; ++i) dst.y[i] = src.y[obs[i]];
        }
        if (src.fixed.coef_names.size() > 0) {
            dst.fixed.X.resize(static_cast<long>(rows.size()), src.fixed.X.cols());
            for (size_t r = 0; r < rows.size(); ++r)
                dst.fixed.X.row(static_cast<long>(r)) = src.fixed.X.row(rows[r]);
        }
        for (size_t k = 0; k < src.bindings.size(); ++k)
            dst.bindings[k].map = detail::take_rows(src.bindings[k].map, rows);
        if (src.offset.size() > 0) {
            dst.offset.resize(static_cast<long>(rows.size()));
            for (size_t r = 0; r < rows.size(); ++r)
                dst.offset[static_cast<long>(r)] = src.offset[rows[r]];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Carried posteriors
// ---------------------------------------------------------------------------

/** Gaussian coefficient posterior carried between stages. */
struct BetaCarry {
    Eigen::VectorXd mean;
    Eigen::MatrixXd precision;
};

/** Moment-matched Gaussian for one hyperparameter on the transformed scale. */
struct HyperCarry {
    double mean = 0.0;
    double prec = 0.0;
};

/**
 * Marginal coefficient posterior of one fit: mean is the modal beta slice,
 * precision the Schur complement of the posterior precision onto beta.
 */
inline BetaCarry beta_posterior_moments(const LatentSystem& sys,
                                        const FitResult& fit) {
    const int k = sys.layout.slices[0].size;
    const int nx = sys.latent_dim() - k;
    BetaCarry out;
    out.mean = fit.mode.head(k);
    Eigen::MatrixXd Hbb =
        Eigen::MatrixXd(Eigen::SparseMatrix<double>(fit.H.block(0, 0, k, k)));
    if (nx == 0) {
        out.precision = Hbb;
        return out;
    }
    Eigen::SparseMatrix<double> Hxx = fit.H.block(k, k, nx, nx);
    Eigen::MatrixXd Hxb =
        Eigen::MatrixXd(Eigen::SparseMatrix<double>(fit.H.block(k, 0, nx, k)));
    SparseLLT llt;
    llt.compute(Hxx);
    require(llt.info() == Eigen::Success, "FactorizationFailure",
            "random-effect precision block is not positive definite");
    out.precision = Hbb - Hxb.transpose() * llt.solve(Hxb);
    return out;
}

/** Per-hyperparameter mean and variance of the weighted point set. */
inline std::vector<HyperCarry> moment_match_hypers(const PosteriorSummary& post,
                                                   double var_floor) {
    const int nh = static_cast<int>(post.points.empty()
                                        ? 0
                                        : post.points.front().theta.size());
    std::vector<HyperCarry> out(nh);
    for (int h = 0; h < nh; ++h) {
        double m = 0.0, s2 = 0.0;
        for (const auto& pt : post.points) m += pt.weight * pt.theta[h];
        for (const auto& pt : post.points)
            s2 += pt.weight * sqr(pt.theta[h] - m);
        out[h].mean = m;
        out[h].prec = 1.0 / std::max(s2, var_floor);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sequential fit
// ---------------------------------------------------------------------------

enum class MergeMode { Marginal, Multivariate };

struct ConsensusOptions {
    OptimizeOptions optimize;
    MergeMode merge = MergeMode::Multivariate;
    bool prior_correction = true;   // count the shared random-effect prior once
    double hyper_var_floor = 1e-4;  // keeps a carried hyper from freezing solid
};

/** Slim per-partition record kept for the merge step. */
struct PartitionFit {
    int index = 0;
    Eigen::VectorXd latent_mean;    // mixture marginals of this partition
    Eigen::VectorXd latent_sd;
    std::vector<char> informed;     // latent element touched by partition data
    Eigen::VectorXd theta_mode;
};

struct SequentialState {
    Layout layout;
    std::vector<std::string> coef_names;
    std::vector<std::string> hyper_names;
    std::vector<char> theta_fixed;
    int n_partitions = 0;

    BetaCarry beta;                      // final coefficient posterior
    std::vector<HyperCarry> theta;       // final hyper posteriors (transformed)
    Eigen::VectorXd theta_hat;           // carried means; fixed entries verbatim
    std::vector<Eigen::VectorXd> beta_prec_diag_path;   // one entry per stage

    std::vector<PartitionFit> parts;
    PosteriorSummary last;               // stage n_p summary, fits stripped

    // Natural-parameter accumulators of the random-effect product, over the
    // non-coefficient rows: sum of posterior precisions, cross blocks against
    // beta, and precision-times-mean vectors.
    Eigen::SparseMatrix<double> sum_Hxx;
    Eigen::MatrixXd sum_Hxb;
    Eigen::VectorXd sum_bx;
    Eigen::SparseMatrix<double> Q_prior_x;   // x-block prior at theta_hat
    Eigen::MatrixXd constraints_x;           // constraint rows on x columns

    int n_beta() const { return layout.slices.empty() ? 0 : layout.slices[0].size; }
    int n_x() const { return layout.dim - n_beta(); }
};

/**
 * Fit the partitions in order, carrying the coefficient posterior and the
 * moment-matched hyperparameter posteriors forward as the next stage's
 * priors. Random-effect information is accumulated for the merge.
 */
inline SequentialState sequential_fit(const ModelSpec& spec,
                                      const PartitionPlan& plan,
                                      const ConsensusOptions& opts = {}) {
    plan.validate();
    SequentialState st;
    st.n_partitions = plan.n_partitions;

    BetaCarry beta;
    std::vector<HyperCarry> theta;

    for (int j = 0; j < plan.n_partitions; ++j) {
        ModelSpec spec_j = partition_spec(spec, plan, j);
        if (j > 0 && beta.mean.size() > 0) {
            spec_j.beta_prior_mean = beta.mean;
            spec_j.beta_prior_precision = beta.precision;
        }
        LatentSystem sys = assemble(spec_j);
        if (j == 0) {
            st.layout = sys.layout;
            st.coef_names = sys.coef_names;
            for (const auto& h : sys.hypers) {
                st.hyper_names.push_back(h.name);
                st.theta_fixed.push_back(h.fixed ? 1 : 0);
            }
            const int nx = sys.latent_dim() - sys.layout.slices[0].size;
            st.sum_Hxx.resize(nx, nx);
            st.sum_Hxb = Eigen::MatrixXd::Zero(nx, sys.layout.slices[0].size);
            st.sum_bx = Eigen::VectorXd::Zero(nx);
        }

        OptimizeOptions oj = opts.optimize;
        if (j > 0) {
            for (size_t h = 0; h < theta.size(); ++h)
                if (!sys.hypers[h].fixed) sys.hypers[h].init = theta[h].mean;
            // The stage-one hyperprior is already inside the carried posterior.
            std::vector<HyperCarry> pen = theta;
            std::vector<char> fixed = st.theta_fixed;
            oj.log_hyperprior = [pen, fixed](const Eigen::VectorXd& t) {
                double lp = 0.0;
                for (int h = 0; h < t.size(); ++h)
                    if (!fixed[h]) lp -= 0.5 * pen[h].prec * sqr(t[h] - pen[h].mean);
                return lp;
            };
        }

        PosteriorSummary post;
        try {
            post = optimize_hyperparameters(sys, oj);
        } catch (const Error& e) {
            fail(e.code(), "partition " + std::to_string(j) + ": " + e.what());
        }

        const FitResult& f = post.fits[post.best];
        const int k = sys.layout.slices[0].size;
        const int nx = sys.latent_dim() - k;
        if (k > 0) {
            beta = beta_posterior_moments(sys, f);
            st.beta_prec_diag_path.push_back(beta.precision.diagonal());
        }
        theta = moment_match_hypers(post, opts.hyper_var_floor);

        if (nx > 0) {
            st.sum_Hxx += Eigen::SparseMatrix<double>(f.H.block(k, k, nx, nx));
            st.sum_Hxb += Eigen::MatrixXd(
                Eigen::SparseMatrix<double>(f.H.block(k, 0, nx, k)));
            st.sum_bx += (f.H * f.mode).tail(nx);
        }

        PartitionFit pf;
        pf.index = j;
        pf.latent_mean = post.latent_mean;
        pf.latent_sd = post.latent_sd;
        pf.theta_mode = post.theta_mode();
        const Eigen::SparseMatrix<double> A = sys.build_A(sys.theta_init());
        pf.informed.assign(sys.latent_dim(), 0);
        for (int c = 0; c < A.outerSize(); ++c)
            for (Eigen::SparseMatrix<double>::InnerIterator it(A, c); it; ++it)
                pf.informed[it.col()] = 1;
        st.parts.push_back(std::move(pf));

        if (j == plan.n_partitions - 1) {
            st.last = post;
            st.last.fits.clear();

            Eigen::VectorXd that = sys.theta_init();
            for (size_t h = 0; h < theta.size(); ++h)
                if (!sys.hypers[h].fixed) that[h] = theta[h].mean;
            st.theta_hat = that;
            if (nx > 0) {
                const Eigen::SparseMatrix<double> Qp = sys.build_Q_prior(that);
                st.Q_prior_x = Qp.block(k, k, nx, nx);
            }
            if (sys.constraints.rows() > 0)
                st.constraints_x = sys.constraints.rightCols(nx);
        }
    }
    st.beta = beta;
    st.theta = theta;
    return st;
}

// ---------------------------------------------------------------------------
// Merging
// ---------------------------------------------------------------------------

/** Precision-weighted combination of independent Gaussian marginals. */
inline std::pair<double, double> merge_marginal_gaussians(
    const std::vector<double>& means, const std::vector<double>& vars) {
    require(!means.empty() && means.size() == vars.size(), "UninformedElement",
            "no informing partitions for element");
    double tau = 0.0, num = 0.0;
    for (size_t j = 0; j < means.size(); ++j) {
        require(vars[j] > 0.0, "UninformedElement", "non-positive variance");
        tau += 1.0 / vars[j];
        num += means[j] / vars[j];
    }
    return {num / tau, 1.0 / tau};
}

/**
 * Gaussian product over the accumulated naturals: merged precision
 * sum_j Q_j - (n_p - 1) Q_prior when the shared-prior correction is on,
 * mean from the summed precision-times-mean vectors.
 */
inline void multivariate_merge(const Eigen::SparseMatrix<double>& sum_Q,
                               const Eigen::VectorXd& eta,
                               const Eigen::SparseMatrix<double>* Q_prior,
                               int n_parts, bool prior_correction,
                               const Eigen::MatrixXd* constraints,
                               Eigen::VectorXd& mean, Eigen::VectorXd& var) {
    Eigen::SparseMatrix<double> Qm = sum_Q;
    if (prior_correction && Q_prior != nullptr && n_parts > 1)
        Qm -= static_cast<double>(n_parts - 1) * (*Q_prior);
    SparseLLT llt;
    llt.compute(Qm);
    require(llt.info() == Eigen::Success, "NotPositiveDefinite",
            "merged random-effect precision is not positive definite");
    mean = llt.solve(eta);
    var = marginal_variances_from_llt(llt);
    if (constraints != nullptr && constraints->rows() > 0) {
        KrigingCorrector kc(llt, *constraints);
        mean = kc.correct_mean(mean);
        var = kc.correct_variances(var);
    }
}

struct MergedLatent {
    MergeMode mode = MergeMode::Multivariate;
    Eigen::VectorXd mean;   // full latent layout; coefficient rows from the
    Eigen::VectorXd sd;     // final sequential stage
};

/**
 * Combine the per-partition random-effect posteriors. Marginal mode
 * precision-weights each element over the partitions whose data touch it;
 * multivariate mode forms the Gaussian product with the shared prior counted
 * once. Coefficient rows are reported from the final sequential stage.
 */
inline MergedLatent merge_random_effects(const SequentialState& st,
                                         MergeMode mode,
                                         bool prior_correction = true) {
    const int k = st.n_beta();
    const int nx = st.n_x();
    MergedLatent out;
    out.mode = mode;
    out.mean = st.last.latent_mean;
    out.sd = st.last.latent_sd;
    if (nx == 0) return out;

    if (mode == MergeMode::Marginal) {
        for (int i = 0; i < nx; ++i) {
            std::vector<double> means, vars;
            for (const auto& pf : st.parts)
                if (pf.informed[k + i]) {
                    means.push_back(pf.latent_mean[k + i]);
                    vars.push_back(sqr(pf.latent_sd[k + i]));
                }
            require(!means.empty(), "UninformedElement",
                    "latent element " + std::to_string(k + i) +
                        " is informed by no partition");
            const auto [m, v] = merge_marginal_gaussians(means, vars);
            out.mean[k + i] = m;
            out.sd[k + i] = std::sqrt(v);
        }
        return out;
    }

    const Eigen::VectorXd eta =
        st.sum_bx - st.sum_Hxb * st.beta.mean;
    Eigen::VectorXd mean, var;
    multivariate_merge(st.sum_Hxx, eta, &st.Q_prior_x, st.n_partitions,
                       prior_correction,
                       st.constraints_x.rows() > 0 ? &st.constraints_x : nullptr,
                       mean, var);
    out.mean.tail(nx) = mean;
    for (int i = 0; i < nx; ++i) out.sd[k + i] = std::sqrt(std::max(var[i], 0.0));
    return out;
}

/** Sequential fit plus merge in one call. */
struct ConsensusResult {
    SequentialState state;
    MergedLatent merged;
};

inline ConsensusResult consensus_fit(const ModelSpec& spec,
                                     const PartitionPlan& plan,
                                     const ConsensusOptions& opts = {}) {
    ConsensusResult r;
    r.state = sequential_fit(spec, plan, opts);
    r.merged = merge_random_effects(r.state, opts.merge, opts.prior_correction);
    return r;
}

// ---------------------------------------------------------------------------
// Consensus-versus-full diagnostics
// ---------------------------------------------------------------------------

/**
 * Per-slice agreement between a merged consensus posterior and a full fit:
 * RMSE and max-abs of the mean differences in full-posterior-sd units, plus
 * hyperparameter point-estimate differences.
 */
inline Table consensus_vs_full_report(const SequentialState& st,
                                      const MergedLatent& merged,
                                      const PosteriorSummary& full) {
    require(st.layout.dim == full.layout.dim &&
                st.layout.slices.size() == full.layout.slices.size(),
            "LayoutMismatch", "consensus and full fits use different layouts");
    for (size_t s = 0; s < st.layout.slices.size(); ++s)
        require(st.layout.slices[s].name == full.layout.slices[s].name &&
                    st.layout.slices[s].size == full.layout.slices[s].size,
                "LayoutMismatch",
                "slice '" + st.layout.slices[s].name + "' differs");

    // kind 0 rows: per-slice mean agreement, in full-posterior-sd units.
    // kind 1 rows: hyperparameter point-estimate difference (transformed scale).
    // Names travel in the comment header, keyed by row number.
    Table t;
    t.columns = {"kind", "index", "value", "max_abs"};
    for (size_t s = 0; s < st.layout.slices.size(); ++s) {
        const Slice& sl = st.layout.slices[s];
        if (sl.size == 0) continue;
        double ss = 0.0, mx = 0.0;
        for (int i = 0; i < sl.size; ++i) {
            const int g = sl.offset + i;
            const double denom = std::max(full.latent_sd[g], 1e-300);
            const double z = (merged.mean[g] - full.latent_mean[g]) / denom;
            ss += z * z;
            mx = std::max(mx, std::abs(z));
        }
        t.comments.push_back("row " + std::to_string(t.nrow()) + "=slice " +
                             sl.name);
        t.add_row({0.0, static_cast<double>(s), std::sqrt(ss / sl.size), mx});
    }
    const Eigen::VectorXd& full_theta = full.theta_mode();
    for (size_t h = 0; h < st.hyper_names.size(); ++h) {
        if (st.theta_fixed[h]) continue;
        t.comments.push_back("row " + std::to_string(t.nrow()) + "=hyper " +
                             st.hyper_names[h]);
        const double diff = st.theta_hat[static_cast<long>(h)] -
                            full_theta[static_cast<long>(h)];
        t.add_row({1.0, static_cast<double>(h), diff, std::abs(diff)});
    }
    return t;
}

} // namespace costa

#endif
