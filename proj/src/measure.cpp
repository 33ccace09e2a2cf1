#include "mfg/measure.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "mfg/errors.hpp"

namespace mfg {

namespace {

constexpr double kWeightSumTol = 1e-12;

std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

EmpiricalMeasure::EmpiricalMeasure(Eigen::MatrixXd points, Eigen::VectorXd weights,
                                   Eigen::MatrixXd probes)
    : points_(std::move(points)), weights_(std::move(weights)), probes_(std::move(probes)) {
    if (points_.rows() != weights_.size())
        throw ConfigError("EmpiricalMeasure: weight count does not match point count");
    if (points_.rows() == 0 && probes_.rows() == 0)
        throw ConfigError("EmpiricalMeasure: empty measure");
    if (points_.rows() > 0) {
        double sum = 0.0;
        for (Eigen::Index i = 0; i < weights_.size(); ++i) {
            if (!(weights_[i] >= 0.0))
                throw ConfigError("EmpiricalMeasure: negative weight at index " +
                                  std::to_string(i));
            sum += weights_[i];
        }
        if (std::abs(sum - 1.0) > kWeightSumTol)
            throw ConfigError("EmpiricalMeasure: weights sum to " + format_g17(sum) +
                              ", expected 1 within 1e-12");
    }
    if (probes_.rows() > 0 && points_.rows() > 0 && probes_.cols() != points_.cols())
        throw ConfigError("EmpiricalMeasure: probe dimension does not match point dimension");
}

EmpiricalMeasure EmpiricalMeasure::uniform(Eigen::MatrixXd points) {
    const Eigen::Index n = points.rows();
    if (n == 0) throw ConfigError("EmpiricalMeasure::uniform: no points");
    Eigen::VectorXd w = Eigen::VectorXd::Constant(n, 1.0 / double(n));
    return EmpiricalMeasure(std::move(points), std::move(w));
}

EmpiricalMeasure EmpiricalMeasure::dirac(const Eigen::VectorXd& x) {
    Eigen::MatrixXd pts(1, x.size());
    pts.row(0) = x.transpose();
    return EmpiricalMeasure(std::move(pts), Eigen::VectorXd::Ones(1));
}

EmpiricalMeasure EmpiricalMeasure::dirac1(double x) {
    return dirac(Eigen::VectorXd::Constant(1, x));
}

EmpiricalMeasure EmpiricalMeasure::gaussian(double mean, double stddev, int n,
                                            std::uint64_t seed) {
    if (n < 1) throw ConfigError("EmpiricalMeasure::gaussian: n must be >= 1");
    if (!(stddev >= 0.0)) throw ConfigError("EmpiricalMeasure::gaussian: stddev must be >= 0");
    std::mt19937_64 rng(seed);
    auto unit = [&rng]() {
        // (0, 1) uniform with 53 significant bits; never exactly 0.
        return (double(rng() >> 11) + 0.5) * 0x1p-53;
    };
    Eigen::MatrixXd pts(n, 1);
    for (int i = 0; i < n; i += 2) {
        const double u1 = unit();
        const double u2 = unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        pts(i, 0) = mean + stddev * r * std::cos(a);
        if (i + 1 < n) pts(i + 1, 0) = mean + stddev * r * std::sin(a);
    }
    return uniform(std::move(pts));
}

Eigen::VectorXd EmpiricalMeasure::row(int i) const {
    return i < n_points() ? point(i) : probe(i - n_points());
}

EmpiricalMeasure EmpiricalMeasure::with_probes(Eigen::MatrixXd probes) const {
    return EmpiricalMeasure(points_, weights_, std::move(probes));
}

EmpiricalMeasure EmpiricalMeasure::without_probes() const {
    return EmpiricalMeasure(points_, weights_);
}

double EmpiricalMeasure::moment(double p) const {
    if (!(p >= 1.0)) throw ConfigError("EmpiricalMeasure::moment: p must be >= 1");
    double acc = 0.0;
    for (int i = 0; i < n_points(); ++i)
        acc += weights_[i] * std::pow(points_.row(i).norm(), p);
    return std::pow(acc, 1.0 / p);
}

double EmpiricalMeasure::integrate(
    const std::function<double(const Eigen::VectorXd&)>& fn) const {
    double acc = 0.0;
    for (int i = 0; i < n_points(); ++i) acc += weights_[i] * fn(point(i));
    return acc;
}

Eigen::VectorXd EmpiricalMeasure::mean() const {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(dim());
    for (int i = 0; i < n_points(); ++i) m += weights_[i] * point(i);
    return m;
}

double EmpiricalMeasure::cached_functional(
    int id, const std::function<double(const Eigen::VectorXd&)>& fn) const {
    for (const auto& [key, value] : functional_cache_)
        if (key == id) return value;
    const double value = integrate(fn);
    functional_cache_.emplace_back(id, value);
    return value;
}

EmpiricalMeasure push_forward(
    const EmpiricalMeasure& mu,
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& fn) {
    Eigen::MatrixXd pts(mu.n_points(), mu.dim());
    for (int i = 0; i < mu.n_points(); ++i) pts.row(i) = fn(mu.point(i)).transpose();
    Eigen::MatrixXd prb(mu.n_probes(), mu.dim());
    for (int i = 0; i < mu.n_probes(); ++i) prb.row(i) = fn(mu.probe(i)).transpose();
    return EmpiricalMeasure(std::move(pts), mu.weights(), std::move(prb));
}

namespace {

// Quantile coupling for d == 1: exact for arbitrary weights. Ties are broken
// by original particle index so the coupling is deterministic.
double wasserstein_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b, int p) {
    auto sorted = [](const EmpiricalMeasure& mu) {
        std::vector<int> idx(mu.n_points());
        for (int i = 0; i < int(idx.size()); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&mu](int l, int r) {
            const double xl = mu.points()(l, 0), xr = mu.points()(r, 0);
            if (xl != xr) return xl < xr;
            return l < r;
        });
        return idx;
    };
    const std::vector<int> ia = sorted(a), ib = sorted(b);
    std::size_t i = 0, j = 0;
    double ra = a.weights()[ia[0]];
    double rb = b.weights()[ib[0]];
    double acc = 0.0;
    while (true) {
        const double step = std::min(ra, rb);
        const double gap = std::abs(a.points()(ia[i], 0) - b.points()(ib[j], 0));
        acc += step * (p == 1 ? gap : gap * gap);
        ra -= step;
        rb -= step;
        if (ra <= 0.0) {
            if (++i >= ia.size()) break;
            ra = a.weights()[ia[i]];
        }
        if (rb <= 0.0) {
            if (++j >= ib.size()) break;
            rb = b.weights()[ib[j]];
        }
    }
    return p == 1 ? acc : std::sqrt(acc);
}

// Exact min-cost assignment (shortest augmenting path, O(n^3)).
double solve_assignment(const Eigen::MatrixXd& cost) {
    const int n = int(cost.rows());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> match(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = match[j0];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const int j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0);
    }
    double total = 0.0;
    for (int j = 1; j <= n; ++j) total += cost(match[j] - 1, j - 1);
    return total;
}

bool uniform_weights(const EmpiricalMeasure& mu) {
    const double w0 = 1.0 / double(mu.n_points());
    for (int i = 0; i < mu.n_points(); ++i)
        if (std::abs(mu.weights()[i] - w0) > 1e-12) return false;
    return true;
}

}  // namespace

double wasserstein(const EmpiricalMeasure& a, const EmpiricalMeasure& b, int p,
                   int assignment_cap) {
    if (p != 1 && p != 2) throw ConfigError("wasserstein: p must be 1 or 2");
    if (a.dim() != b.dim()) throw ConfigError("wasserstein: dimension mismatch");
    if (a.n_points() == 0 || b.n_points() == 0)
        throw ConfigError("wasserstein: empty measure");
    if (a.dim() == 1) return wasserstein_1d(a, b, p);
    if (a.n_points() != b.n_points() || !uniform_weights(a) || !uniform_weights(b))
        throw UnsupportedTransport(
            "wasserstein: d > 1 requires equal point counts with uniform weights");
    const int n = a.n_points();
    if (n > assignment_cap)
        throw UnsupportedTransport("wasserstein: " + std::to_string(n) +
                                   " points exceeds assignment cap " +
                                   std::to_string(assignment_cap));
    Eigen::MatrixXd cost(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double gap = (a.points().row(i) - b.points().row(j)).norm();
            cost(i, j) = p == 1 ? gap : gap * gap;
        }
    const double mean_cost = solve_assignment(cost) / double(n);
    return p == 1 ? mean_cost : std::sqrt(mean_cost);
}

std::string to_csv(const EmpiricalMeasure& mu) {
    std::ostringstream out;
    out << "kind,w";
    for (int c = 0; c < mu.dim(); ++c) out << ",x_" << (c + 1);
    out << "\n";
    auto emit = [&out, &mu](const char* kind, double w, const Eigen::VectorXd& x) {
        out << kind << "," << format_g17(w);
        for (int c = 0; c < mu.dim(); ++c) out << "," << format_g17(x[c]);
        out << "\n";
    };
    for (int i = 0; i < mu.n_points(); ++i) emit("point", mu.weights()[i], mu.point(i));
    for (int i = 0; i < mu.n_probes(); ++i) emit("probe", 0.0, mu.probe(i));
    return out.str();
}

EmpiricalMeasure measure_from_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("measure_from_csv: empty input");
    auto split = [](const std::string& s) {
        std::vector<std::string> cells;
        std::size_t pos = 0;
        while (true) {
            const std::size_t next = s.find(',', pos);
            cells.push_back(s.substr(pos, next - pos));
            if (next == std::string::npos) break;
            pos = next + 1;
        }
        return cells;
    };
    const auto header = split(line);
    if (header.size() < 3 || header[0] != "kind" || header[1] != "w")
        throw ConfigError("measure_from_csv: bad header");
    const int d = int(header.size()) - 2;
    std::vector<Eigen::VectorXd> pts, prbs;
    std::vector<double> wts;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line);
        if (int(cells.size()) != d + 2)
            throw ConfigError("measure_from_csv: bad row: " + line);
        Eigen::VectorXd x(d);
        for (int c = 0; c < d; ++c) x[c] = std::stod(cells[2 + c]);
        if (cells[0] == "point") {
            pts.push_back(x);
            wts.push_back(std::stod(cells[1]));
        } else if (cells[0] == "probe") {
            prbs.push_back(x);
        } else {
            throw ConfigError("measure_from_csv: unknown kind: " + cells[0]);
        }
    }
    Eigen::MatrixXd points(pts.size(), d), probes(prbs.size(), d);
    Eigen::VectorXd weights(wts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        points.row(i) = pts[i].transpose();
        weights[Eigen::Index(i)] = wts[i];
    }
    for (std::size_t i = 0; i < prbs.size(); ++i) probes.row(i) = prbs[i].transpose();
    return EmpiricalMeasure(std::move(points), std::move(weights), std::move(probes));
}

}  // namespace mfg
