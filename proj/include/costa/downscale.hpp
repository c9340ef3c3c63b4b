#ifndef COSTA_DOWNSCALE_HPP
#define COSTA_DOWNSCALE_HPP

#include <Eigen/Sparse>

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "common.hpp"
#include "geometry.hpp"
#include "spde.hpp"

/**
 * @file downscale.hpp
 * @brief Equal-weight area-averaging operators linking a continuous latent
 *        field at mesh nodes to areal observations, including stacked
 *        operators for time-varying spatial supports.
 *
 * Integration points are deterministic grid points filtered by containment,
 * so aggregation matrices are reproducible build artifacts. Averaging is
 * equal-weight over the points of an area, not area-weighted quadrature.
 */

namespace costa {

struct AreaSupport {
    std::vector<Polygon> areas;
    int t_begin = 0;   // validity period, half-open [t_begin, t_end)
    int t_end = 1;

    int n_areas() const { return static_cast<int>(areas.size()); }

    bool covers_time(int t) const { return t >= t_begin && t < t_end; }

    void validate() const {
        require(!areas.empty(), "EmptyArea", "support has no areas");
        require(t_begin < t_end, "UnmappedTime", "empty validity period");
        for (const auto& a : areas) a.validate();
        // Overlap screen: sample the bbox intersection of each pair.
        for (size_t i = 0; i < areas.size(); ++i)
            for (size_t j = i + 1; j < areas.size(); ++j) {
                auto bi = areas[i].bounds();
                auto bj = areas[j].bounds();
                const double xmin = std::max(bi.xmin, bj.xmin);
                const double xmax = std::min(bi.xmax, bj.xmax);
                const double ymin = std::max(bi.ymin, bj.ymin);
                const double ymax = std::min(bi.ymax, bj.ymax);
                if (xmin >= xmax || ymin >= ymax) continue;
                // Irrational, axis-distinct offsets keep samples off shared
                // edges of tessellations (whose bbox diagonals the midpoint
                // grid would hit exactly).
                const int k = 7;
                for (int a = 0; a < k; ++a)
                    for (int b = 0; b < k; ++b) {
                        Eigen::Vector2d p(
                            xmin + (xmax - xmin) * (a + 0.31830988618) / k,
                            ymin + (ymax - ymin) * (b + 0.57721566490) / k);
                        require(!(areas[i].contains(p) && areas[j].contains(p)),
                                "OverlappingAreas",
                                "areas " + std::to_string(i) + " and " +
                                    std::to_string(j) + " overlap");
                    }
            }
    }
};

struct IntegrationScheme {
    std::vector<std::vector<Eigen::Vector2d>> points;   // per area

    int n_areas() const { return static_cast<int>(points.size()); }

    void validate(const AreaSupport& support) const {
        require(n_areas() == support.n_areas(), "DimensionMismatch",
                "scheme/support area counts differ");
        for (int i = 0; i < n_areas(); ++i) {
            require(!points[i].empty(), "EmptyArea",
                    "area " + std::to_string(i) + " has no integration points");
            for (const auto& p : points[i])
                require(support.areas[i].contains(p), "EmptyArea",
                        "integration point escaped its area");
        }
    }
};

namespace detail {

/** Grid of k x k cell centres over the polygon's bbox, filtered by containment. */
inline std::vector<Eigen::Vector2d> grid_in_polygon(const Polygon& poly, int k) {
    auto b = poly.bounds();
    std::vector<Eigen::Vector2d> pts;
    for (int iy = 0; iy < k; ++iy)
        for (int ix = 0; ix < k; ++ix) {
            Eigen::Vector2d p(b.xmin + (b.xmax - b.xmin) * (ix + 0.5) / k,
                              b.ymin + (b.ymax - b.ymin) * (iy + 0.5) / k);
            if (poly.contains(p)) pts.push_back(p);
        }
    return pts;
}

} // namespace detail

/**
 * Deterministic integration points: the grid resolution per area is refined
 * until at least min_points fall inside (resolution doubles, capped).
 */
inline IntegrationScheme integration_points(const AreaSupport& support,
                                            int min_points = 25) {
    require(min_points >= 1, "ParameterOutOfRange", "need min_points >= 1");
    IntegrationScheme scheme;
    for (const auto& poly : support.areas) {
        int k = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(min_points))));
        std::vector<Eigen::Vector2d> pts;
        for (; k <= 4096; k *= 2) {
            pts = detail::grid_in_polygon(poly, k);
            if (static_cast<int>(pts.size()) >= min_points) break;
        }
        require(static_cast<int>(pts.size()) >= 1, "EmptyArea",
                "no integration point lands inside area " + poly.name);
        scheme.points.push_back(std::move(pts));
    }
    scheme.validate(support);
    return scheme;
}

/** Fixed-spacing variant: points per unit area = 1/step^2; slivers can fail. */
inline IntegrationScheme integration_points_spacing(const AreaSupport& support,
                                                    double step) {
    require(step > 0.0, "ParameterOutOfRange", "step must be positive");
    IntegrationScheme scheme;
    for (const auto& poly : support.areas) {
        auto b = poly.bounds();
        const int kx = std::max(1, static_cast<int>(std::round((b.xmax - b.xmin) / step)));
        std::vector<Eigen::Vector2d> pts = detail::grid_in_polygon(poly, kx);
        require(!pts.empty(), "EmptyArea",
                "no integration point lands inside area " + poly.name);
        scheme.points.push_back(std::move(pts));
    }
    scheme.validate(support);
    return scheme;
}

struct AggregationMatrix {
    Eigen::SparseMatrix<double> M;   // n_areas x m mesh nodes

    int n_areas() const { return static_cast<int>(M.rows()); }

    void validate() const {
        for (int i = 0; i < M.rows(); ++i) {
            double s = 0.0;
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator
                     it(Mrow(), i);
                 it; ++it)
                s += it.value();
            require(std::abs(s - 1.0) <= 1e-10, "NotNormalized",
                    "aggregation row " + std::to_string(i) + " sums to " +
                        std::to_string(s));
        }
    }

    const Eigen::SparseMatrix<double, Eigen::RowMajor>& Mrow() const {
        if (row_cache_.rows() != M.rows()) row_cache_ = M;
        return row_cache_;
    }

  private:
    mutable Eigen::SparseMatrix<double, Eigen::RowMajor> row_cache_;
};

/** Row i = equal-weight average of the projection rows of area i's points. */
inline AggregationMatrix aggregation_matrix(const IntegrationScheme& scheme,
                                            const TriMesh& mesh) {
    std::vector<Eigen::Vector2d> all;
    std::vector<int> offset{0};
    for (const auto& pts : scheme.points) {
        all.insert(all.end(), pts.begin(), pts.end());
        offset.push_back(static_cast<int>(all.size()));
    }
    ProjectionMatrix proj = projection(mesh, all);
    for (int p = 0; p < proj.n_points(); ++p)
        require(!proj.outside[p], "PointOutsideMesh",
                "integration point outside the mesh domain");

    Eigen::SparseMatrix<double, Eigen::RowMajor> projr = proj.A;
    std::vector<Eigen::Triplet<double>> trip;
    for (int i = 0; i < scheme.n_areas(); ++i) {
        const int n_i = offset[i + 1] - offset[i];
        for (int p = offset[i]; p < offset[i + 1]; ++p)
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator
                     it(projr, p);
                 it; ++it)
                trip.emplace_back(i, static_cast<int>(it.col()), it.value() / n_i);
    }
    AggregationMatrix out;
    out.M.resize(scheme.n_areas(), mesh.n_vertices());
    out.M.setFromTriplets(trip.begin(), trip.end());
    out.M.makeCompressed();
    out.validate();
    return out;
}

/**
 * Stacked space-time aggregation over time-varying supports.
 *
 * The latent vector uses space-major ordering (index = node * n_times + t).
 * One output row is produced per (time, area) pair of the unique support
 * covering that time; rows are ordered by time, then area index.
 */
struct StackedAggregation {
    Eigen::SparseMatrix<double> M;     // n_obs x (m * n_times)
    struct RowKey {
        int support;
        int area;
        int time;
    };
    std::vector<RowKey> keys;
};

inline StackedAggregation stacked_support_matrix(
    const std::vector<AreaSupport>& supports, const TriMesh& mesh, int n_times,
    int min_points = 25) {
    require(!supports.empty(), "EmptyArea", "no supports given");
    require(n_times >= 1, "DimensionTooSmall", "need n_times >= 1");
    for (const auto& s : supports) s.validate();

    std::vector<AggregationMatrix> aggs;
    for (const auto& s : supports)
        aggs.push_back(aggregation_matrix(integration_points(s, min_points), mesh));

    const int m = mesh.n_vertices();
    std::vector<Eigen::Triplet<double>> trip;
    StackedAggregation out;
    int row = 0;
    for (int t = 0; t < n_times; ++t) {
        int owner = -1;
        for (size_t s = 0; s < supports.size(); ++s)
            if (supports[s].covers_time(t)) {
                require(owner < 0, "UnmappedTime",
                        "time " + std::to_string(t) + " covered by two supports");
                owner = static_cast<int>(s);
            }
        require(owner >= 0, "UnmappedTime",
                "time " + std::to_string(t) + " covered by no support");
        const auto& agg = aggs[owner];
        for (int a = 0; a < agg.n_areas(); ++a) {
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator
                     it(agg.Mrow(), a);
                 it; ++it)
                trip.emplace_back(row, static_cast<int>(it.col()) * n_times + t,
                                  it.value());
            out.keys.push_back({owner, a, t});
            ++row;
        }
    }
    out.M.resize(row, m * n_times);
    out.M.setFromTriplets(trip.begin(), trip.end());
    out.M.makeCompressed();
    return out;
}

/** Coordinate-list sparse text: header `row,col,value`, '#' comments kept. */
inline void write_sparse_coo(std::ostream& out, const Eigen::SparseMatrix<double>& M,
                             const std::vector<std::string>& comments = {}) {
    for (const auto& c : comments) out << "# " << c << '\n';
    out << "# shape " << M.rows() << ' ' << M.cols() << '\n';
    out << "row,col,value\n";
    for (int k = 0; k < M.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(M, k); it; ++it)
            out << it.row() << ',' << it.col() << ','
                << detail::format_double(it.value()) << '\n';
}

inline Eigen::SparseMatrix<double> read_sparse_coo(std::istream& in) {
    std::string line;
    long rows = -1, cols = -1;
    bool header_seen = false;
    std::vector<Eigen::Triplet<double>> trip;
    while (std::getline(in, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        if (line[first] == '#') {
            std::istringstream cs(line.substr(first + 1));
            std::string word;
            if (cs >> word && word == "shape") cs >> rows >> cols;
            continue;
        }
        if (!header_seen) {
            header_seen = true;   // column header line
            continue;
        }
        std::istringstream ls(line);
        std::string cell;
        long r, c;
        double v;
        std::getline(ls, cell, ',');
        r = std::stol(cell);
        std::getline(ls, cell, ',');
        c = std::stol(cell);
        std::getline(ls, cell, ',');
        v = std::stod(cell);
        trip.emplace_back(static_cast<int>(r), static_cast<int>(c), v);
    }
    require(rows >= 0 && cols >= 0, "MalformedRow", "missing shape comment");
    Eigen::SparseMatrix<double> M(rows, cols);
    M.setFromTriplets(trip.begin(), trip.end());
    return M;
}

} // namespace costa

#endif
