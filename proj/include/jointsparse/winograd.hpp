#pragma once

// Winograd minimal-filtering convolution F(m x m, r x r).
//
// Transform matrices are generated by the Cook-Toom construction over exact
// rationals: n - 1 finite interpolation points plus the point at infinity.
// With points a_j, f_j = prod_{l != j} (a_j - a_l) and M(x) = prod_l (x - a_l):
//
//   G[j][k] = a_j^k / |f_j|                      (last row: e_{r-1})
//   F[j][:] = sign(f_j) * coeffs(M(x) / (x - a_j)) (last row: coeffs(M))
//   S[j][i] = a_j^i                              (last row: e_{m-1})
//
// so that for an n x n tile x and an r x r filter w the valid
// cross-correlation is  y = S^T ((G w G^T) .* (F x F^T)) S.

#include <jointsparse/errors.hpp>
#include <jointsparse/tensor.hpp>

#include <boost/rational.hpp>

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

namespace jointsparse {

using Rational = boost::rational<std::int64_t>;

struct WinogradBasis {
    std::size_t r = 0;  // filter side
    std::size_t n = 0;  // tile side
    std::size_t m = 0;  // output tile side, n - r + 1
    Matrix F;           // n x n input transform
    Matrix G;           // n x r filter transform
    Matrix S;           // n x m inverse transform
    std::vector<Rational> interpolation_points;
};

namespace detail {

inline double to_double(const Rational& q) {
    return static_cast<double>(q.numerator()) / static_cast<double>(q.denominator());
}

// Coefficients (ascending powers) of prod (x - roots[i]).
inline std::vector<Rational> poly_from_roots(const std::vector<Rational>& roots) {
    std::vector<Rational> coeffs{Rational(1)};
    for (const Rational& root : roots) {
        std::vector<Rational> next(coeffs.size() + 1, Rational(0));
        for (std::size_t i = 0; i < coeffs.size(); ++i) {
            next[i + 1] += coeffs[i];
            next[i] -= root * coeffs[i];
        }
        coeffs = std::move(next);
    }
    return coeffs;
}

inline Rational rational_pow(const Rational& base, std::size_t exponent) {
    Rational result(1);
    for (std::size_t i = 0; i < exponent; ++i) result *= base;
    return result;
}

}  // namespace detail

/// Standard interpolation points for the supported tile configurations.
inline std::vector<Rational> default_interpolation_points(std::size_t r, std::size_t n) {
    if (r == 3 && n == 4) return {Rational(0), Rational(1), Rational(-1)};
    if (r == 3 && n == 6) return {Rational(0), Rational(1), Rational(-1), Rational(2), Rational(-2)};
    if (r == 5 && n == 8)
        return {Rational(0),  Rational(1),     Rational(-1),     Rational(2),
                Rational(-2), Rational(1, 2), Rational(-1, 2)};
    throw UnsupportedError("no default interpolation points for (r,n)=(" + std::to_string(r) + "," +
                           std::to_string(n) + "); supply them explicitly");
}

inline WinogradBasis build_basis(std::size_t r, std::size_t n, std::vector<Rational> points) {
    if (r == 0 || n < r)
        throw ConstructionError("invalid Winograd configuration (r,n)=(" + std::to_string(r) + "," +
                                std::to_string(n) + ")");
    if (points.size() != n - 1)
        throw ConstructionError("need " + std::to_string(n - 1) + " interpolation points, got " +
                                std::to_string(points.size()));
    for (std::size_t i = 0; i < points.size(); ++i)
        for (std::size_t j = i + 1; j < points.size(); ++j)
            if (points[i] == points[j]) throw ConstructionError("repeated interpolation point");

    const std::size_t m = n - r + 1;
    const std::size_t finite = n - 1;

    WinogradBasis basis;
    basis.r = r;
    basis.n = n;
    basis.m = m;
    basis.F = Matrix(n, n);
    basis.G = Matrix(n, r);
    basis.S = Matrix(n, m);

    for (std::size_t j = 0; j < finite; ++j) {
        std::vector<Rational> others;
        Rational f(1);
        for (std::size_t l = 0; l < finite; ++l) {
            if (l == j) continue;
            others.push_back(points[l]);
            f *= points[j] - points[l];
        }
        const Rational magnitude = boost::abs(f);
        const Rational sign = f < Rational(0) ? Rational(-1) : Rational(1);

        for (std::size_t k = 0; k < r; ++k)
            basis.G.at(j, k) = detail::to_double(detail::rational_pow(points[j], k) / magnitude);

        const auto lagrange = detail::poly_from_roots(others);
        for (std::size_t k = 0; k < lagrange.size(); ++k)
            basis.F.at(j, k) = detail::to_double(sign * lagrange[k]);

        for (std::size_t i = 0; i < m; ++i)
            basis.S.at(j, i) = detail::to_double(detail::rational_pow(points[j], i));
    }

    const auto full = detail::poly_from_roots(points);
    for (std::size_t k = 0; k < full.size(); ++k) basis.F.at(n - 1, k) = detail::to_double(full[k]);
    basis.G.at(n - 1, r - 1) = 1.0;
    basis.S.at(n - 1, m - 1) = 1.0;

    basis.interpolation_points = std::move(points);
    return basis;
}

inline WinogradBasis build_basis(std::size_t r, std::size_t n) {
    if (r == 0 || n < r)
        throw ConstructionError("invalid Winograd configuration (r,n)=(" + std::to_string(r) + "," +
                                std::to_string(n) + ")");
    return build_basis(r, n, default_interpolation_points(r, n));
}

/// G w G^T.
inline Matrix transform_filter(const WinogradBasis& basis, const Matrix& w) {
    if (w.rows() != basis.r || w.cols() != basis.r)
        throw DimensionError("transform_filter expects a " + std::to_string(basis.r) + "x" +
                             std::to_string(basis.r) + " filter");
    return matmul(matmul(basis.G, w), transpose(basis.G));
}

/// F x F^T.
inline Matrix transform_input(const WinogradBasis& basis, const Matrix& x) {
    if (x.rows() != basis.n || x.cols() != basis.n)
        throw DimensionError("transform_input expects a " + std::to_string(basis.n) + "x" +
                             std::to_string(basis.n) + " tile");
    return matmul(matmul(basis.F, x), transpose(basis.F));
}

/// S^T Y S.
inline Matrix inverse_transform(const WinogradBasis& basis, const Matrix& y) {
    if (y.rows() != basis.n || y.cols() != basis.n)
        throw DimensionError("inverse_transform expects an n x n Winograd-domain tile");
    return matmul(matmul(transpose(basis.S), y), basis.S);
}

/// Tiling of a valid stride-1 convolution output into m x m patches. The input
/// is zero-padded on the right and bottom to tiles * m + r - 1.
struct TileGrid {
    std::size_t in_h = 0, in_w = 0;
    std::size_t out_h = 0, out_w = 0;
    std::size_t stride = 0;  // == m
    std::size_t tiles_h = 0, tiles_w = 0;
    std::size_t pad_h = 0, pad_w = 0;

    std::size_t tile_count() const noexcept { return tiles_h * tiles_w; }
};

inline TileGrid make_tile_grid(const WinogradBasis& basis, std::size_t height, std::size_t width) {
    if (height < basis.r || width < basis.r) throw DimensionError("input smaller than filter");
    TileGrid g;
    g.in_h = height;
    g.in_w = width;
    g.out_h = height - basis.r + 1;
    g.out_w = width - basis.r + 1;
    g.stride = basis.m;
    g.tiles_h = (g.out_h + basis.m - 1) / basis.m;
    g.tiles_w = (g.out_w + basis.m - 1) / basis.m;
    g.pad_h = g.tiles_h * basis.m + basis.r - 1 - height;
    g.pad_w = g.tiles_w * basis.m + basis.r - 1 - width;
    return g;
}

/// Valid stride-1 cross-correlation. input C x H x W, filters D x C x r x r.
inline Tensor direct_conv2d(const Tensor& input, const Tensor& filters) {
    if (input.rank() != 3 || filters.rank() != 4)
        throw DimensionError("direct_conv2d expects C x H x W input and D x C x r x r filters");
    const std::size_t C = input.extent(0), H = input.extent(1), W = input.extent(2);
    const std::size_t D = filters.extent(0), r = filters.extent(2);
    if (filters.extent(1) != C || filters.extent(3) != r)
        throw DimensionError("filter shape " + shape_string(filters.shape()) + " incompatible with input " +
                             shape_string(input.shape()));
    if (H < r || W < r) throw DimensionError("input smaller than filter");
    const std::size_t Ho = H - r + 1, Wo = W - r + 1;

    Tensor out({D, Ho, Wo});
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < r; ++u)
                for (std::size_t v = 0; v < r; ++v) {
                    const double w = filters.at(d, c, u, v);
                    if (w == 0.0) continue;
                    for (std::size_t p = 0; p < Ho; ++p) {
                        const double* in_row = &input.values()[(c * H + p + u) * W + v];
                        double* out_row = &out.values()[(d * Ho + p) * Wo];
                        for (std::size_t q = 0; q < Wo; ++q) out_row[q] += w * in_row[q];
                    }
                }
    return out;
}

/// Filters D x C x r x r -> Winograd-domain filters D x C x n x n.
inline Tensor transform_filters(const WinogradBasis& basis, const Tensor& filters) {
    if (filters.rank() != 4 || filters.extent(2) != basis.r || filters.extent(3) != basis.r)
        throw DimensionError("filters " + shape_string(filters.shape()) + " do not match basis r=" +
                             std::to_string(basis.r));
    const std::size_t D = filters.extent(0), C = filters.extent(1), r = basis.r, n = basis.n;
    Tensor out({D, C, n, n});
    Matrix w(r, r);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t u = 0; u < r; ++u)
                for (std::size_t v = 0; v < r; ++v) w.at(u, v) = filters.at(d, c, u, v);
            const Matrix t = transform_filter(basis, w);
            std::copy(t.values().begin(), t.values().end(), &out.at(d, c, 0, 0));
        }
    return out;
}

namespace detail {

// Extracts the zero-padded n x n tile of channel c whose top-left corner is (row, col).
inline void load_tile(const Tensor& input, std::size_t c, std::size_t row, std::size_t col, Matrix& tile) {
    const std::size_t H = input.extent(1), W = input.extent(2), n = tile.rows();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t y = row + i, x = col + j;
            tile.at(i, j) = (y < H && x < W) ? input.at(c, y, x) : 0.0;
        }
}

}  // namespace detail

/// Tiled Winograd convolution with pre-transformed filters (D x C x n x n).
/// Entries of `wfilters` that are exactly zero are skipped, so a pruned
/// Winograd-domain filter set runs as a sparse engine through the same path.
inline Tensor winograd_conv2d_transformed(const WinogradBasis& basis, const Tensor& input, const Tensor& wfilters) {
    if (input.rank() != 3 || wfilters.rank() != 4)
        throw DimensionError("winograd_conv2d expects C x H x W input and D x C x n x n filters");
    const std::size_t C = input.extent(0), n = basis.n, m = basis.m;
    const std::size_t D = wfilters.extent(0);
    if (wfilters.extent(1) != C || wfilters.extent(2) != n || wfilters.extent(3) != n)
        throw DimensionError("Winograd filters " + shape_string(wfilters.shape()) + " incompatible with input " +
                             shape_string(input.shape()) + " and n=" + std::to_string(n));
    const TileGrid grid = make_tile_grid(basis, input.extent(1), input.extent(2));

    const Matrix Ft = transpose(basis.F);
    const Matrix St = transpose(basis.S);
    Tensor out({D, grid.out_h, grid.out_w});
    std::vector<Matrix> transformed(C);
    Matrix tile(n, n);
    Matrix acc(n, n);

    for (std::size_t th = 0; th < grid.tiles_h; ++th)
        for (std::size_t tw = 0; tw < grid.tiles_w; ++tw) {
            const std::size_t row = th * m, col = tw * m;
            for (std::size_t c = 0; c < C; ++c) {
                detail::load_tile(input, c, row, col, tile);
                transformed[c] = matmul(matmul(basis.F, tile), Ft);
            }
            for (std::size_t d = 0; d < D; ++d) {
                std::fill(acc.values().begin(), acc.values().end(), 0.0);
                for (std::size_t c = 0; c < C; ++c) {
                    const double* w = wfilters.values().data() + (d * C + c) * n * n;
                    const auto x = transformed[c].values();
                    for (std::size_t k = 0; k < n * n; ++k)
                        if (w[k] != 0.0) acc[k] += w[k] * x[k];
                }
                const Matrix y = matmul(matmul(St, acc), basis.S);
                for (std::size_t i = 0; i < m && row + i < grid.out_h; ++i)
                    for (std::size_t j = 0; j < m && col + j < grid.out_w; ++j)
                        out.at(d, row + i, col + j) = y.at(i, j);
            }
        }
    return out;
}

/// Dense Winograd convolution, equivalent to direct_conv2d. Only stride 1 is
/// supported.
inline Tensor winograd_conv2d(const WinogradBasis& basis, const Tensor& input, const Tensor& filters,
                              std::size_t stride = 1) {
    if (stride != 1) throw UnsupportedError("Winograd convolution supports stride 1 only");
    if (input.rank() != 3 || filters.rank() != 4 || filters.extent(1) != input.extent(0))
        throw DimensionError("winograd_conv2d: filters " + shape_string(filters.shape()) +
                             " incompatible with input " + shape_string(input.shape()));
    return winograd_conv2d_transformed(basis, input, transform_filters(basis, filters));
}

}  // namespace jointsparse
