#ifndef COSTA_SPDE_HPP
#define COSTA_SPDE_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "common.hpp"
#include "graph_precision.hpp"
#include "table.hpp"

/**
 * @file spde.hpp
 * @brief P1 finite-element assembly of Matern (nu = 1) precision matrices on
 *        2-D triangulations, barycentric projection, analytic Matern
 *        correlation, and seeded GMRF sampling.
 *
 * The range convention is kappa = sqrt(8 nu) / rho, which places the Matern
 * correlation near 0.1 at distance rho. Smoothness is fixed at alpha = 2
 * (nu = alpha - d/2 = 1 in two dimensions).
 */

namespace costa {

struct BBox {
    double xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;

    double width() const { return xmax - xmin; }
    double height() const { return ymax - ymin; }
    double area() const { return width() * height(); }
};

struct TriMesh {
    std::vector<Eigen::Vector2d> vertices;
    std::vector<std::array<int, 3>> triangles;

    int n_vertices() const { return static_cast<int>(vertices.size()); }
    int n_triangles() const { return static_cast<int>(triangles.size()); }

    double signed_area(int t) const {
        const auto& tr = triangles[t];
        const Eigen::Vector2d& a = vertices[tr[0]];
        const Eigen::Vector2d& b = vertices[tr[1]];
        const Eigen::Vector2d& c = vertices[tr[2]];
        return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) -
                      (c.x() - a.x()) * (b.y() - a.y()));
    }

    double total_area() const {
        double s = 0.0;
        for (int t = 0; t < n_triangles(); ++t) s += signed_area(t);
        return s;
    }

    /** Vertices incident to an edge shared by exactly one triangle. */
    std::vector<char> boundary_flags() const {
        std::map<std::pair<int, int>, int> edge_count;
        for (const auto& tr : triangles)
            for (int e = 0; e < 3; ++e) {
                int i = tr[e], j = tr[(e + 1) % 3];
                edge_count[{std::min(i, j), std::max(i, j)}] += 1;
            }
        std::vector<char> flag(vertices.size(), 0);
        for (const auto& [edge, count] : edge_count)
            if (count == 1) {
                flag[edge.first] = 1;
                flag[edge.second] = 1;
            }
        return flag;
    }

    void validate() const {
        require(n_vertices() >= 3, "DimensionTooSmall", "mesh needs >= 3 vertices");
        require(n_triangles() >= 1, "DimensionTooSmall", "mesh needs >= 1 triangle");
        for (const auto& tr : triangles)
            for (int v : tr)
                require(v >= 0 && v < n_vertices(), "DimensionMismatch",
                        "triangle index out of range");
        for (int t = 0; t < n_triangles(); ++t)
            require(signed_area(t) > 0.0, "DegenerateTriangle",
                    "triangle " + std::to_string(t) + " is not positively oriented");
        // Duplicate detection: points within 1e-9 share an x-window after sorting.
        std::vector<int> order(vertices.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            return vertices[a].x() < vertices[b].x();
        });
        for (size_t a = 0; a < order.size(); ++a)
            for (size_t b = a + 1; b < order.size(); ++b) {
                if (vertices[order[b]].x() - vertices[order[a]].x() > 1e-9) break;
                require((vertices[order[a]] - vertices[order[b]]).lpNorm<Eigen::Infinity>() > 1e-9,
                        "DuplicateVertex", "vertices closer than 1e-9");
            }
    }

    /** Distance from a point to the nearest boundary vertex. */
    double boundary_distance(const Eigen::Vector2d& p) const {
        std::vector<char> flag = boundary_flags();
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n_vertices(); ++i)
            if (flag[i]) best = std::min(best, (vertices[i] - p).norm());
        return best;
    }
};

/** Regular grid mesh: nx*ny vertices, each cell split into two triangles. */
inline TriMesh structured_mesh(const BBox& box, int nx, int ny) {
    require(nx >= 2 && ny >= 2, "DimensionTooSmall", "need nx, ny >= 2");
    require(box.width() > 0.0 && box.height() > 0.0, "DegenerateBox",
            "bounding box has no area");
    TriMesh mesh;
    mesh.vertices.reserve(static_cast<size_t>(nx) * ny);
    for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix)
            mesh.vertices.emplace_back(
                box.xmin + box.width() * ix / (nx - 1),
                box.ymin + box.height() * iy / (ny - 1));
    auto vid = [nx](int ix, int iy) { return iy * nx + ix; };
    for (int iy = 0; iy + 1 < ny; ++iy)
        for (int ix = 0; ix + 1 < nx; ++ix) {
            const int v00 = vid(ix, iy), v10 = vid(ix + 1, iy);
            const int v01 = vid(ix, iy + 1), v11 = vid(ix + 1, iy + 1);
            mesh.triangles.push_back({v00, v10, v11});
            mesh.triangles.push_back({v00, v11, v01});
        }
    mesh.validate();
    return mesh;
}

struct FemMatrices {
    Eigen::SparseMatrix<double> C;   // lumped (diagonal) mass
    Eigen::SparseMatrix<double> G;   // stiffness

    int dim() const { return static_cast<int>(C.rows()); }
};

/** P1 assembly: C_ii = sum of adjacent triangle areas / 3, G from gradients. */
inline FemMatrices assemble_fem(const TriMesh& mesh) {
    mesh.validate();
    const int m = mesh.n_vertices();
    std::vector<Eigen::Triplet<double>> gt, ct;
    gt.reserve(mesh.n_triangles() * 9);
    ct.reserve(mesh.n_triangles() * 3);
    for (int t = 0; t < mesh.n_triangles(); ++t) {
        const auto& tr = mesh.triangles[t];
        const double area = mesh.signed_area(t);
        require(area >= 1e-14, "DegenerateTriangle",
                "triangle " + std::to_string(t) + " has near-zero area");
        double b[3], c[3];
        for (int i = 0; i < 3; ++i) {
            const Eigen::Vector2d& pj = mesh.vertices[tr[(i + 1) % 3]];
            const Eigen::Vector2d& pk = mesh.vertices[tr[(i + 2) % 3]];
            b[i] = pj.y() - pk.y();
            c[i] = pk.x() - pj.x();
        }
        for (int i = 0; i < 3; ++i) {
            ct.emplace_back(tr[i], tr[i], area / 3.0);
            for (int j = 0; j < 3; ++j)
                gt.emplace_back(tr[i], tr[j],
                                (b[i] * b[j] + c[i] * c[j]) / (4.0 * area));
        }
    }
    FemMatrices fem;
    fem.C.resize(m, m);
    fem.C.setFromTriplets(ct.begin(), ct.end());
    fem.G.resize(m, m);
    fem.G.setFromTriplets(gt.begin(), gt.end());
    return fem;
}

struct SpdeParams {
    double kappa = 1.0;      // spatial scale, 1/distance
    double tau_spde = 1.0;   // variance-regulating scale
    double sigma = 1.0;      // marginal standard deviation
    double rho_range = 1.0;  // correlation range
    static constexpr double alpha_smoothness = 2.0;
    static constexpr double nu = 1.0;
    static constexpr int d = 2;

    void validate() const {
        require(kappa > 0.0 && tau_spde > 0.0, "ParameterOutOfRange",
                "kappa and tau must be positive");
        require(std::abs(kappa - std::sqrt(8.0 * nu) / rho_range) <= 1e-12 * kappa,
                "ParameterOutOfRange", "kappa and rho_range are inconsistent");
        const double want_tau2 = std::tgamma(nu) /
            (std::tgamma(alpha_smoothness) * std::pow(4.0 * M_PI, d / 2.0) *
             kappa * kappa * sigma * sigma);
        require(std::abs(tau_spde * tau_spde - want_tau2) <= 1e-12 * want_tau2,
                "ParameterOutOfRange", "tau and sigma are inconsistent");
    }
};

/** Parameters from (range, marginal sd) under kappa = sqrt(8 nu)/rho. */
inline SpdeParams spde_params_from_range(double rho_range, double sigma) {
    require(rho_range > 0.0 && sigma > 0.0, "ParameterOutOfRange",
            "range and sigma must be positive");
    SpdeParams p;
    p.rho_range = rho_range;
    p.sigma = sigma;
    p.kappa = std::sqrt(8.0 * SpdeParams::nu) / rho_range;
    const double tau2 = std::tgamma(SpdeParams::nu) /
        (std::tgamma(SpdeParams::alpha_smoothness) *
         std::pow(4.0 * M_PI, SpdeParams::d / 2.0) * p.kappa * p.kappa *
         sigma * sigma);
    p.tau_spde = std::sqrt(tau2);
    p.validate();
    return p;
}

/** Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G); SPD for kappa > 0. */
inline SparsePrecision spde_precision(const FemMatrices& fem, const SpdeParams& p) {
    p.validate();
    const int m = fem.dim();
    Eigen::VectorXd cinv(m);
    for (int i = 0; i < m; ++i) {
        const double cii = fem.C.coeff(i, i);
        require(cii > 0.0, "DegenerateTriangle", "mass matrix has a zero diagonal");
        cinv[i] = 1.0 / cii;
    }
    Eigen::SparseMatrix<double> GCG = fem.G * cinv.asDiagonal() * fem.G;
    const double k2 = p.kappa * p.kappa;
    SparsePrecision out;
    out.Q = (k2 * k2) * fem.C + 2.0 * k2 * fem.G + GCG;
    out.Q = out.Q * (p.tau_spde * p.tau_spde);
    out.Q.makeCompressed();
    return out;
}

struct ProjectionMatrix {
    Eigen::SparseMatrix<double> A;   // n_points x m barycentric weights
    std::vector<char> outside;       // per-point flag: no containing triangle

    int n_points() const { return static_cast<int>(A.rows()); }
};

/** Barycentric weights of the containing triangle; outside rows stay zero. */
inline ProjectionMatrix projection(const TriMesh& mesh,
                                   const std::vector<Eigen::Vector2d>& points) {
    const int np = static_cast<int>(points.size());
    ProjectionMatrix out;
    out.A.resize(np, mesh.n_vertices());
    out.outside.assign(np, 1);
    std::vector<Eigen::Triplet<double>> trip;
    constexpr double tol = 1e-12;
    for (int pi = 0; pi < np; ++pi) {
        const Eigen::Vector2d& p = points[pi];
        for (int t = 0; t < mesh.n_triangles(); ++t) {
            const auto& tr = mesh.triangles[t];
            const Eigen::Vector2d& a = mesh.vertices[tr[0]];
            const Eigen::Vector2d& b = mesh.vertices[tr[1]];
            const Eigen::Vector2d& c = mesh.vertices[tr[2]];
            const double area2 = (b.x() - a.x()) * (c.y() - a.y()) -
                                 (c.x() - a.x()) * (b.y() - a.y());
            const double w0 = ((b.x() - p.x()) * (c.y() - p.y()) -
                               (c.x() - p.x()) * (b.y() - p.y())) / area2;
            const double w1 = ((c.x() - p.x()) * (a.y() - p.y()) -
                               (a.x() - p.x()) * (c.y() - p.y())) / area2;
            const double w2 = 1.0 - w0 - w1;
            if (w0 >= -tol && w1 >= -tol && w2 >= -tol) {
                trip.emplace_back(pi, tr[0], std::max(w0, 0.0));
                trip.emplace_back(pi, tr[1], std::max(w1, 0.0));
                trip.emplace_back(pi, tr[2], std::max(w2, 0.0));
                out.outside[pi] = 0;
                break;
            }
        }
    }
    out.A.setFromTriplets(trip.begin(), trip.end());
    return out;
}

/** Matern correlation for nu = 1: (kappa h) K_1(kappa h), 1 at h = 0. */
inline double matern_correlation(double h, const SpdeParams& p) {
    require(h >= 0.0, "ParameterOutOfRange", "distance must be nonnegative");
    if (h == 0.0) return 1.0;
    const double x = p.kappa * h;
    if (x > 700.0) return 0.0;  // Bessel underflow region
    return x * std::cyl_bessel_k(1.0, x);
}

/**
 * Draw x ~ N(0, Q^{-1}) via sparse Cholesky of the permuted system:
 * with P Q P^T = L L^T, solve L^T y = z and undo the permutation.
 */
inline Eigen::VectorXd sample_gmrf(const SparsePrecision& Q, RngStream& rng) {
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(Q.Q);
    require(llt.info() == Eigen::Success, "FactorizationFailure",
            "precision is not positive definite");
    Eigen::VectorXd z(Q.dim());
    for (int i = 0; i < z.size(); ++i) z[i] = rng.normal();
    Eigen::VectorXd y = llt.matrixU().solve(z);
    return llt.permutationPinv() * y;
}

// ---------------------------------------------------------------------------
// Mesh text format: `vertices` section (x y per line), then `triangles`
// section (i j k per line, zero-based). '#' starts a comment.
// ---------------------------------------------------------------------------

inline TriMesh read_mesh(std::istream& in) {
    TriMesh mesh;
    std::string line;
    int section = 0;  // 0 none, 1 vertices, 2 triangles
    while (std::getline(in, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        std::string head;
        ls >> head;
        if (head == "vertices") {
            section = 1;
            continue;
        }
        if (head == "triangles") {
            section = 2;
            continue;
        }
        std::istringstream row(line);
        if (section == 1) {
            double x, y;
            require(static_cast<bool>(row >> x >> y), "MalformedRow",
                    "bad vertex line: " + line);
            mesh.vertices.emplace_back(x, y);
        } else if (section == 2) {
            int i, j, k;
            require(static_cast<bool>(row >> i >> j >> k), "MalformedRow",
                    "bad triangle line: " + line);
            mesh.triangles.push_back({i, j, k});
        } else {
            fail("MalformedRow", "data before a section header: " + line);
        }
    }
    // Ingestion normalizes orientation; validate() then enforces it.
    for (size_t t = 0; t < mesh.triangles.size(); ++t)
        if (mesh.signed_area(static_cast<int>(t)) < 0.0)
            std::swap(mesh.triangles[t][1], mesh.triangles[t][2]);
    mesh.validate();
    return mesh;
}

inline void write_mesh(std::ostream& out, const TriMesh& mesh) {
    out << "vertices\n";
    for (const auto& v : mesh.vertices)
        out << detail::format_double(v.x()) << ' ' << detail::format_double(v.y())
            << '\n';
    out << "triangles\n";
    for (const auto& t : mesh.triangles)
        out << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
}

} // namespace costa

#endif
