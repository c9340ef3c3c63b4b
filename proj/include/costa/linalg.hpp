#ifndef COSTA_LINALG_HPP
#define COSTA_LINALG_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <vector>

#include "common.hpp"

/**
 * @file linalg.hpp
 * @brief Sparse-Cholesky utilities: log-determinant, Takahashi selected
 *        inversion for marginal variances, and conditioning-by-kriging
 *        corrections for hard linear constraints.
 */

namespace costa {

using SparseLLT = Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>;

inline double logdet_from_llt(const SparseLLT& llt) {
    Eigen::SparseMatrix<double> L = llt.matrixL();
    double s = 0.0;
    for (int j = 0; j < L.cols(); ++j)
        s += std::log(L.coeff(j, j));
    return 2.0 * s;
}

namespace detail {

/** Binary search for (row, col) inside a compressed column of L's pattern. */
inline int csc_find(const int* outer, const int* inner, int col, int row) {
    const int lo = outer[col];
    const int hi = outer[col + 1];
    const int* first = inner + lo;
    const int* last = inner + hi;
    const int* it = std::lower_bound(first, last, row);
    if (it != last && *it == row) return lo + static_cast<int>(it - first);
    return -1;
}

} // namespace detail

/**
 * Marginal variances diag(Q^{-1}) via Takahashi recursions on the Cholesky
 * pattern. With P Q P^T = L L^T the selected inverse Z satisfies, for
 * pattern entries (i, j), i >= j, processed from the last column back:
 *
 *   Z_ij = (i == j) / L_jj^2  -  (1/L_jj) * sum_{k > j, L_kj != 0} L_kj Z_ki
 *
 * The factor pattern is closed under the recursion, so lookups outside it
 * are exact zeros.
 */
inline Eigen::VectorXd marginal_variances_from_llt(const SparseLLT& llt) {
    Eigen::SparseMatrix<double> L = llt.matrixL();
    L.makeCompressed();
    const int n = static_cast<int>(L.cols());
    const int* outer = L.outerIndexPtr();
    const int* inner = L.innerIndexPtr();
    const double* lx = L.valuePtr();
    std::vector<double> z(L.nonZeros(), 0.0);

    auto z_at = [&](int row, int col) -> double {
        // symmetric lookup, stored lower-triangular
        const int r = std::max(row, col);
        const int c = std::min(row, col);
        const int pos = detail::csc_find(outer, inner, c, r);
        return pos < 0 ? 0.0 : z[pos];
    };

    for (int j = n - 1; j >= 0; --j) {
        const int lo = outer[j];
        const int hi = outer[j + 1];
        require(lo < hi && inner[lo] == j, "FactorizationFailure",
                "Cholesky factor has an empty column");
        const double ljj = lx[lo];
        for (int p = hi - 1; p >= lo; --p) {
            const int i = inner[p];
            if (i == j) {
                // Z_jj = 1/L_jj^2 - (1/L_jj) sum L_kj Z_kj, using this
                // column's off-diagonal entries computed just above.
                double sd = 0.0;
                for (int q = lo + 1; q < hi; ++q) sd += lx[q] * z[q];
                z[p] = 1.0 / (ljj * ljj) - sd / ljj;
            } else {
                // Z_ij needs Z_ki for k, i > j, all in completed columns.
                double s = 0.0;
                for (int q = lo + 1; q < hi; ++q) s += lx[q] * z_at(inner[q], i);
                z[p] = -s / ljj;
            }
        }
    }

    // Undo the fill-reducing permutation: Z approximates (P Q P^T)^{-1}.
    const auto& perm = llt.permutationP().indices();
    Eigen::VectorXd diag(n);
    for (int i = 0; i < n; ++i) {
        const int pi = perm[i];
        const int pos = detail::csc_find(outer, inner, pi, pi);
        require(pos >= 0, "FactorizationFailure", "missing diagonal entry");
        diag[i] = z[pos];
    }
    return diag;
}

/**
 * Conditioning by kriging for hard constraints C x = 0 on a Gaussian with
 * precision factorized in `llt`. Bundles the solve products so mean and
 * marginal-variance corrections share work.
 */
struct KrigingCorrector {
    Eigen::MatrixXd V;        // n x k solves Q^{-1} C^T
    Eigen::LDLT<Eigen::MatrixXd> S;   // factor of C Q^{-1} C^T
    Eigen::MatrixXd Ct;

    KrigingCorrector(const SparseLLT& llt, const Eigen::MatrixXd& C) {
        require(C.rows() >= 1, "DimensionMismatch", "no constraints given");
        Ct = C.transpose();
        V = llt.solve(Ct);
        Eigen::MatrixXd S_dense = C * V;
        S.compute(S_dense);
        require(S.info() == Eigen::Success, "FactorizationFailure",
                "constraint system is singular");
    }

    /** x - Q^{-1} C^T (C Q^{-1} C^T)^{-1} C x */
    Eigen::VectorXd correct_mean(const Eigen::VectorXd& x) const {
        return x - V * S.solve(Ct.transpose() * x);
    }

    /** Marginal variances under the constraint: diag(Sigma) - diag(V S^{-1} V^T). */
    Eigen::VectorXd correct_variances(const Eigen::VectorXd& unconstrained) const {
        Eigen::MatrixXd W = S.solve(V.transpose());
        Eigen::VectorXd out = unconstrained;
        for (int i = 0; i < out.size(); ++i)
            out[i] -= V.row(i).dot(W.col(i));
        return out;
    }
};

/** Euclidean projection of a vector onto the null space of C. */
inline Eigen::VectorXd project_to_nullspace(const Eigen::MatrixXd& C,
                                            const Eigen::VectorXd& g) {
    Eigen::LDLT<Eigen::MatrixXd> cct(C * C.transpose());
    return g - C.transpose() * cct.solve(C * g);
}

} // namespace costa

#endif
