#ifndef COSTA_GRAPH_PRECISION_HPP
#define COSTA_GRAPH_PRECISION_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <unsupported/Eigen/KroneckerProduct>

#include <cmath>
#include <istream>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"

/**
 * @file graph_precision.hpp
 * @brief Sparse precision builders for areal, temporal, interaction, and
 *        spatial-econometric Gaussian Markov random fields.
 *
 * All builders are pure functions of their inputs; outputs are immutable
 * sparse matrices that can be shared across threads. Intrinsic structures
 * (Besag, RW1) report their null-space dimension through rank_deficiency;
 * the inference layer is responsible for the matching sum-to-zero
 * constraints.
 */

namespace costa {

struct AdjacencyGraph {
    int n = 0;
    Eigen::SparseMatrix<double> W;   // symmetric, zero diagonal
    bool row_normalized = false;

    Eigen::VectorXd degrees() const {
        return W * Eigen::VectorXd::Ones(n);
    }

    std::vector<std::vector<int>> neighbors() const {
        std::vector<std::vector<int>> nb(n);
        for (int k = 0; k < W.outerSize(); ++k)
            for (Eigen::SparseMatrix<double>::InnerIterator it(W, k); it; ++it)
                if (it.value() != 0.0) nb[it.row()].push_back(static_cast<int>(it.col()));
        return nb;
    }

    void validate() const {
        require(n >= 1, "EmptyGraph", "graph has no areas");
        require(W.rows() == n && W.cols() == n, "DimensionMismatch", "W is not n x n");
        if (row_normalized) {
            Eigen::VectorXd rs = W * Eigen::VectorXd::Ones(n);
            for (int i = 0; i < n; ++i)
                require(std::abs(rs[i] - 1.0) <= 1e-12, "NotNormalized",
                        "row " + std::to_string(i) + " does not sum to 1");
        } else {
            Eigen::SparseMatrix<double> diff =
                Eigen::SparseMatrix<double>(W.transpose()) - W;
            for (int k = 0; k < diff.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator it(diff, k); it; ++it)
                    require(std::abs(it.value()) <= 1e-12, "NotSymmetric",
                            "W is not symmetric");
        }
        for (int i = 0; i < n; ++i)
            require(W.coeff(i, i) == 0.0, "SelfLoop", "W has a nonzero diagonal entry");
    }

    bool connected() const {
        if (n == 0) return false;
        std::vector<char> seen(n, 0);
        std::queue<int> q;
        q.push(0);
        seen[0] = 1;
        int count = 1;
        auto nb = neighbors();
        while (!q.empty()) {
            int v = q.front();
            q.pop();
            for (int u : nb[v])
                if (!seen[u]) {
                    seen[u] = 1;
                    ++count;
                    q.push(u);
                }
        }
        return count == n;
    }
};

/** Binary symmetric adjacency from an undirected edge list (0-based). */
inline AdjacencyGraph make_graph(int n, const std::vector<std::pair<int, int>>& edges) {
    require(n >= 1, "EmptyGraph", "graph has no areas");
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(edges.size() * 2);
    for (auto [i, j] : edges) {
        require(i >= 0 && i < n && j >= 0 && j < n, "DimensionMismatch",
                "edge index out of range");
        require(i != j, "SelfLoop", "self loop in edge list");
        trip.emplace_back(i, j, 1.0);
        trip.emplace_back(j, i, 1.0);
    }
    AdjacencyGraph g;
    g.n = n;
    g.W.resize(n, n);
    g.W.setFromTriplets(trip.begin(), trip.end(),
                        [](const double&, const double&) { return 1.0; });
    return g;
}

/** Neighbor-pair text: one "i j" (or "i,j") pair per line, '#' comments. */
inline AdjacencyGraph read_adjacency_pairs(std::istream& in, int n_areas) {
    std::vector<std::pair<int, int>> edges;
    std::string line;
    while (std::getline(in, line)) {
        for (char& ch : line)
            if (ch == ',' || ch == '\t') ch = ' ';
        const auto first = line.find_first_not_of(" \r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        int i = -1, j = -1;
        require(static_cast<bool>(ls >> i >> j), "MalformedRow",
                "expected two indices per line: " + line);
        edges.emplace_back(i, j);
    }
    return make_graph(n_areas, edges);
}

inline AdjacencyGraph row_normalize(const AdjacencyGraph& g) {
    g.validate();
    Eigen::VectorXd deg = g.degrees();
    for (int i = 0; i < g.n; ++i)
        require(deg[i] > 0.0, "IsolatedArea",
                "area " + std::to_string(i) + " has no neighbors");
    AdjacencyGraph out = g;
    out.row_normalized = true;
    for (int k = 0; k < out.W.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(out.W, k); it; ++it)
            it.valueRef() = it.value() / deg[it.row()];
    return out;
}

struct SparsePrecision {
    Eigen::SparseMatrix<double> Q;
    int rank_deficiency = 0;

    int dim() const { return static_cast<int>(Q.rows()); }
    int rank() const { return dim() - rank_deficiency; }
};

/** Identity-structured precision tau * I. */
inline SparsePrecision iid_precision(int n, double tau) {
    require(n >= 1, "DimensionTooSmall", "need n >= 1");
    require(tau > 0.0, "ParameterOutOfRange", "tau must be positive");
    SparsePrecision p;
    p.Q.resize(n, n);
    p.Q.setIdentity();
    p.Q *= tau;
    return p;
}

/** Intrinsic CAR: Q = tau (D - W); null space is the constant vector. */
inline SparsePrecision besag_precision(const AdjacencyGraph& g, double tau) {
    g.validate();
    require(tau > 0.0, "ParameterOutOfRange", "tau must be positive");
    require(g.connected(), "DisconnectedGraph",
            "Besag structure needs a connected graph");
    Eigen::VectorXd deg = g.degrees();
    SparsePrecision p;
    p.Q = -g.W;
    for (int i = 0; i < g.n; ++i) p.Q.coeffRef(i, i) += deg[i];
    p.Q = p.Q * tau;
    p.Q.makeCompressed();
    p.rank_deficiency = 1;
    return p;
}

/** Q = tau [ I + lambda (D - I - W) ]; proper for lambda < 1. */
inline SparsePrecision leroux_precision(const AdjacencyGraph& g, double tau,
                                        double lambda) {
    g.validate();
    require(tau > 0.0, "ParameterOutOfRange", "tau must be positive");
    require(lambda >= 0.0 && lambda <= 1.0, "ParameterOutOfRange",
            "lambda must lie in [0,1]");
    if (lambda == 1.0) return besag_precision(g, tau);
    Eigen::VectorXd deg = g.degrees();
    SparsePrecision p;
    p.Q = -g.W * lambda;
    for (int i = 0; i < g.n; ++i)
        p.Q.coeffRef(i, i) += 1.0 + lambda * (deg[i] - 1.0);
    p.Q = p.Q * tau;
    p.Q.makeCompressed();
    return p;
}

/** First-order random walk increments; null space is the constant vector. */
inline SparsePrecision rw1_precision(int n_times, double tau) {
    require(n_times >= 2, "DimensionTooSmall", "RW1 needs n >= 2");
    require(tau > 0.0, "ParameterOutOfRange", "tau must be positive");
    std::vector<Eigen::Triplet<double>> trip;
    for (int t = 0; t + 1 < n_times; ++t) {
        trip.emplace_back(t, t, tau);
        trip.emplace_back(t + 1, t + 1, tau);
        trip.emplace_back(t, t + 1, -tau);
        trip.emplace_back(t + 1, t, -tau);
    }
    SparsePrecision p;
    p.Q.resize(n_times, n_times);
    p.Q.setFromTriplets(trip.begin(), trip.end());
    p.rank_deficiency = 1;
    return p;
}

/**
 * Stationary AR1 with marginal precision tau:
 * Q = tau/(1-phi^2) tridiag(-phi; 1, 1+phi^2, ..., 1+phi^2, 1).
 */
inline SparsePrecision ar1_precision(int n_times, double tau, double phi) {
    require(n_times >= 1, "DimensionTooSmall", "AR1 needs n >= 1");
    require(tau > 0.0, "ParameterOutOfRange", "tau must be positive");
    require(std::abs(phi) < 1.0, "NonStationary", "AR1 needs |phi| < 1");
    const double s = tau / (1.0 - phi * phi);
    std::vector<Eigen::Triplet<double>> trip;
    for (int t = 0; t < n_times; ++t) {
        const bool interior = t > 0 && t + 1 < n_times;
        trip.emplace_back(t, t, s * (interior ? 1.0 + phi * phi : 1.0));
        if (t + 1 < n_times) {
            trip.emplace_back(t, t + 1, -s * phi);
            trip.emplace_back(t + 1, t, -s * phi);
        }
    }
    if (n_times == 1) trip.emplace_back(0, 0, tau - s);  // lone node: marginal only
    SparsePrecision p;
    p.Q.resize(n_times, n_times);
    p.Q.setFromTriplets(trip.begin(), trip.end());
    return p;
}

enum class InteractionType { I, II, III, IV };

/**
 * Space-time interaction precision in space-major ordering
 * (index = area * n_times + time, so the spatial factor is on the left).
 * Types substitute identity for the unstructured factor(s).
 */
inline SparsePrecision kronecker_interaction(const SparsePrecision& Qs,
                                             const SparsePrecision& Qt,
                                             InteractionType type, double tau_st) {
    require(tau_st > 0.0, "ParameterOutOfRange", "tau_st must be positive");
    const int ns = Qs.dim();
    const int nt = Qt.dim();
    require(ns >= 1 && nt >= 1, "DimensionMismatch", "empty interaction factor");

    Eigen::SparseMatrix<double> Is(ns, ns), It(nt, nt);
    Is.setIdentity();
    It.setIdentity();

    const bool use_s = type == InteractionType::III || type == InteractionType::IV;
    const bool use_t = type == InteractionType::II || type == InteractionType::IV;

    SparsePrecision p;
    p.Q = Eigen::kroneckerProduct(use_s ? Qs.Q : Is, use_t ? Qt.Q : It).eval();
    p.Q = p.Q * tau_st;
    p.Q.makeCompressed();
    const int rank_s = use_s ? Qs.rank() : ns;
    const int rank_t = use_t ? Qt.rank() : nt;
    p.rank_deficiency = ns * nt - rank_s * rank_t;
    return p;
}

/** Spatial error structure Q = tau (I - rho W)^T (I - rho W). */
inline SparsePrecision slm_error_precision(const AdjacencyGraph& g, double tau,
                                           double rho_l) {
    g.validate();
    require(g.row_normalized, "ParameterOutOfRange",
            "SLM error structure needs a row-normalized adjacency");
    require(tau > 0.0, "ParameterOutOfRange", "tau must be positive");
    require(std::abs(rho_l) < 1.0, "ParameterOutOfRange", "need |rho_l| < 1");
    Eigen::SparseMatrix<double> I(g.n, g.n);
    I.setIdentity();
    Eigen::SparseMatrix<double> B = I - g.W * rho_l;
    SparsePrecision p;
    p.Q = Eigen::SparseMatrix<double>(B.transpose()) * B;
    p.Q = p.Q * tau;
    p.Q.makeCompressed();
    return p;
}

/**
 * Spatially lagged design: solves (I + rho W) Z = X column by column.
 * The sign of rho is caller data; no explicit inverse is formed.
 */
inline Eigen::MatrixXd slm_design_transform(const Eigen::MatrixXd& X,
                                            const AdjacencyGraph& g, double rho) {
    g.validate();
    require(g.row_normalized, "ParameterOutOfRange",
            "design transform needs a row-normalized adjacency");
    require(std::abs(rho) < 1.0, "ParameterOutOfRange", "need |rho| < 1");
    require(X.rows() == g.n, "DimensionMismatch", "design rows != n areas");
    if (rho == 0.0) return X;
    Eigen::SparseMatrix<double> I(g.n, g.n);
    I.setIdentity();
    Eigen::SparseMatrix<double> A = I + g.W * rho;
    A.makeCompressed();
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(A);
    require(lu.info() == Eigen::Success, "SingularSystem",
            "I + rho W is not invertible");
    return lu.solve(X);
}

/**
 * Dense cross-category precision: Q_ii = tau_i, Q_ij = rho_ij / sqrt(tau_i tau_j).
 * Replicated per observation as a small correlated random-effect block.
 */
inline Eigen::MatrixXd correlation_effect_precision(const std::vector<double>& taus,
                                                    const Eigen::MatrixXd& rhos) {
    const int D = static_cast<int>(taus.size());
    require(D >= 1 && D <= 10, "DimensionMismatch", "need 1 <= D <= 10 categories");
    require(rhos.rows() == D && rhos.cols() == D, "DimensionMismatch",
            "rho matrix must be D x D");
    for (double t : taus)
        require(t > 0.0, "ParameterOutOfRange", "tau must be positive");
    Eigen::MatrixXd Q(D, D);
    for (int i = 0; i < D; ++i) {
        Q(i, i) = taus[i];
        for (int j = i + 1; j < D; ++j) {
            require(std::abs(rhos(i, j) - rhos(j, i)) <= 1e-12, "NotSymmetric",
                    "rho matrix must be symmetric");
            Q(i, j) = Q(j, i) = rhos(i, j) / std::sqrt(taus[i] * taus[j]);
        }
    }
    Eigen::LLT<Eigen::MatrixXd> llt(Q);
    require(llt.info() == Eigen::Success, "NotPositiveDefinite",
            "correlation parameters give an indefinite precision");
    return Q;
}

} // namespace costa

#endif
