#include "mfg/solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <string>
#include <list>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "mfg/errors.hpp"

namespace mfg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

uint64_t fnv1a_mix(uint64_t h, long long v) {
    unsigned char bytes[sizeof v];
    std::memcpy(bytes, &v, sizeof v);
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

long long quantize(double x, double scale) {
    double q = x * scale;
    if (!(std::fabs(q) < 9.0e18)) {
        long long bits = 0;
        std::memcpy(&bits, &x, sizeof bits);
        return bits;
    }
    return std::llround(q);
}

Mat stack_rows(const EmpiricalMeasure& m) {
    Mat rows(m.n_rows(), m.dim());
    for (int i = 0; i < m.n_rows(); ++i) rows.row(i) = m.row(i).transpose();
    return rows;
}

uint64_t hash_cloud(const EmpiricalMeasure& m) {
    uint64_t h = 1469598103934665603ull;
    h = fnv1a_mix(h, m.n_points());
    h = fnv1a_mix(h, m.n_probes());
    h = fnv1a_mix(h, m.dim());
    for (int i = 0; i < m.n_rows(); ++i) {
        Vec r = m.row(i);
        for (int j = 0; j < r.size(); ++j) h = fnv1a_mix(h, quantize(r[j], 1e12));
    }
    for (int i = 0; i < m.n_points(); ++i) h = fnv1a_mix(h, quantize(m.weights()[i], 1e15));
    return h;
}

// Cubic Hermite midpoint of a dense-output segment of length h.
Mat hermite_mid(const Mat& y0, const Mat& s0, const Mat& y1, const Mat& s1, double h) {
    return 0.5 * (y0 + y1) + (h / 8.0) * (s0 - s1);
}

double max_abs_diff(const std::vector<Mat>& a, const std::vector<Mat>& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double v = (a[i] - b[i]).cwiseAbs().maxCoeff();
        if (!(v <= worst)) worst = v;  // propagates NaN upward as well
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Picard sweep engine for one interval.
// ---------------------------------------------------------------------------

class SweepEngine {
public:
    SweepEngine(const CoefficientModel& model, const ConstantCascade& cascade,
                const SolverOptions& opts, const TimeGrid& grid, const EmpiricalMeasure& m0)
        : model_(model),
          cascade_(cascade),
          opts_(opts),
          grid_(grid),
          m0_(m0),
          R_(m0.n_rows()),
          N_(m0.n_points()),
          d_(m0.dim()),
          n_(grid.n_steps),
          h_(grid.dt()) {}

    FlowSolution run(const TerminalMap& terminal, double tol, const FlowSolution* warm);

    // One decoupled forward pass driven by a frozen costate field. Exposed for
    // the fixed-point defect measurement.
    void forward_pass(const std::vector<Mat>& Zf, const std::vector<Mat>& Wf,
                      std::vector<Mat>& X, std::vector<Mat>& F,
                      std::vector<EmpiricalMeasure>& node_m, std::vector<Vec>& warm_alpha) const;

private:
    EmpiricalMeasure cloud_of(const Mat& rows) const {
        if (R_ > N_)
            return EmpiricalMeasure(rows.topRows(N_), m0_.weights(), rows.bottomRows(R_ - N_));
        return EmpiricalMeasure(rows.topRows(N_), m0_.weights());
    }

    Vec newton(const Vec& x, const EmpiricalMeasure& mu, const Vec& z, Vec& warm) const {
        ControlSolve cs = solve_control(model_, cascade_, x, mu, z, &warm, opts_.control);
        warm = cs.alpha_hat;
        return cs.alpha_hat;
    }

    // Forward drift rows at one stage.
    Mat stage_f(const Mat& Xs, const EmpiricalMeasure& mu, const Mat& Zs,
                std::vector<Vec>& warm_alpha) const {
        Mat K(R_, d_);
        for (int r = 0; r < R_; ++r) {
            Vec x = Xs.row(r).transpose();
            Vec z = Zs.row(r).transpose();
            Vec a = newton(x, mu, z, warm_alpha[r]);
            K.row(r) = model_.f(x, mu, a).transpose();
        }
        return K;
    }

    // Costate RHS rows -(dx_f z + dx_g) at one stage; optionally records the
    // stage controls.
    Mat stage_g(const Mat& Xs, const EmpiricalMeasure& mu, const Mat& Zs,
                std::vector<Vec>& warm_alpha, Mat* controls = nullptr) const {
        Mat L(R_, d_);
        for (int r = 0; r < R_; ++r) {
            Vec x = Xs.row(r).transpose();
            Vec z = Zs.row(r).transpose();
            Vec a = newton(x, mu, z, warm_alpha[r]);
            L.row(r) = -(model_.dx_f(x, mu, a) * z + model_.dx_g(x, mu, a)).transpose();
            if (controls) controls->row(r) = a.transpose();
        }
        return L;
    }

    void check_finite(const Mat& M, const char* where) const {
        if (!M.allFinite() || M.cwiseAbs().maxCoeff() > 1e12)
            throw PicardDiverged(std::string(where) + ": iterate left the finite range", -1,
                                 kInf);
    }

    const CoefficientModel& model_;
    const ConstantCascade& cascade_;
    SolverOptions opts_;
    TimeGrid grid_;
    const EmpiricalMeasure& m0_;
    int R_, N_, d_, n_;
    double h_;
};

void SweepEngine::forward_pass(const std::vector<Mat>& Zf, const std::vector<Mat>& Wf,
                               std::vector<Mat>& X, std::vector<Mat>& F,
                               std::vector<EmpiricalMeasure>& node_m,
                               std::vector<Vec>& warm_alpha) const {
    X.assign(n_ + 1, Mat());
    F.assign(n_ + 1, Mat());
    node_m.assign(n_ + 1, EmpiricalMeasure());

    X[0] = stack_rows(m0_);
    node_m[0] = m0_;
    for (int i = 0; i < n_; ++i) {
        const Mat& Zi = Zf[i];
        const Mat& Zn = Zf[i + 1];
        Mat Zmid = hermite_mid(Zi, Wf[i], Zn, Wf[i + 1], h_);

        Mat K1 = stage_f(X[i], node_m[i], Zi, warm_alpha);
        F[i] = K1;
        Mat Xa = X[i] + (h_ / 2.0) * K1;
        Mat K2 = stage_f(Xa, cloud_of(Xa), Zmid, warm_alpha);
        Mat Xb = X[i] + (h_ / 2.0) * K2;
        Mat K3 = stage_f(Xb, cloud_of(Xb), Zmid, warm_alpha);
        Mat Xc = X[i] + h_ * K3;
        Mat K4 = stage_f(Xc, cloud_of(Xc), Zn, warm_alpha);

        X[i + 1] = X[i] + (h_ / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4);
        check_finite(X[i + 1], "forward pass");
        node_m[i + 1] = cloud_of(X[i + 1]);
    }
    F[n_] = stage_f(X[n_], node_m[n_], Zf[n_], warm_alpha);
}

FlowSolution SweepEngine::run(const TerminalMap& terminal, double tol, const FlowSolution* warm) {
    std::vector<Mat> Zf(n_ + 1), Wf(n_ + 1);
    const double tscale =
        std::max({1.0, std::fabs(grid_.t_start), std::fabs(grid_.t_end)});
    bool warm_usable = warm && warm->grid.n_steps == n_ && warm->n_rows() == R_ &&
                       warm->d() == d_ &&
                       std::fabs(warm->grid.t_start - grid_.t_start) <= 1e-9 * tscale &&
                       std::fabs(warm->grid.t_end - grid_.t_end) <= 1e-9 * tscale;
    if (warm_usable) {
        Zf = warm->Z;
        Wf = warm->dZds;
    } else {
        Mat z0 = terminal(m0_, std::max(tol, 1e-3));
        for (int i = 0; i <= n_; ++i) {
            Zf[i] = z0;
            Wf[i] = Mat::Zero(R_, d_);
        }
    }

    std::vector<Vec> warm_alpha(R_, Vec::Zero(model_.d_alpha));
    std::vector<Mat> X, F, Zn(n_ + 1), Wn(n_ + 1), A(n_ + 1);
    std::vector<EmpiricalMeasure> node_m;
    for (int i = 0; i <= n_; ++i) A[i] = Mat(R_, model_.d_alpha);

    double prev_change = kInf;
    double divergence_cap = kInf;
    double last_residual = 0.0;
    int sweeps = 0;
    bool converged = false;

    for (int iter = 0; iter < opts_.picard_max; ++iter) {
        double hint = std::max(tol, std::min(1e-3, 0.2 * prev_change));

        forward_pass(Zf, Wf, X, F, node_m, warm_alpha);

        Mat ZT = terminal(node_m[n_], hint);
        if (ZT.rows() != R_ || ZT.cols() != d_)
            throw ConfigError("terminal map returned rows of the wrong shape");

        Zn[n_] = ZT;
        Wn[n_] = stage_g(X[n_], node_m[n_], ZT, warm_alpha, &A[n_]);
        for (int i = n_ - 1; i >= 0; --i) {
            Mat Xmid = hermite_mid(X[i], F[i], X[i + 1], F[i + 1], h_);
            EmpiricalMeasure mmid = cloud_of(Xmid);
            const Mat& L1 = Wn[i + 1];
            Mat L2 = stage_g(Xmid, mmid, Zn[i + 1] - (h_ / 2.0) * L1, warm_alpha);
            Mat L3 = stage_g(Xmid, mmid, Zn[i + 1] - (h_ / 2.0) * L2, warm_alpha);
            Mat L4 = stage_g(X[i], node_m[i], Zn[i + 1] - h_ * L3, warm_alpha);
            Zn[i] = Zn[i + 1] - (h_ / 6.0) * (L1 + 2.0 * L2 + 2.0 * L3 + L4);
            check_finite(Zn[i], "backward pass");
            Wn[i] = stage_g(X[i], node_m[i], Zn[i], warm_alpha, &A[i]);
        }

        // Convergence is judged on the point rows only: probes are passive
        // readouts that contract at the same rate, and counting them would
        // let a rider change the sweep count of the coupled system.
        double change = 0.0;
        for (int i = 0; i <= n_; ++i)
            change = std::max(change,
                              (Zn[i].topRows(N_) - Zf[i].topRows(N_)).cwiseAbs().maxCoeff());
        ++sweeps;
        if (!std::isfinite(change))
            throw PicardDiverged("sweep produced a non-finite update", -1, change);
        if (change > divergence_cap)
            throw PicardDiverged("sweep updates are growing", -1, change);
        if (prev_change == kInf) divergence_cap = 1e6 * std::max(1.0, change);

        if (opts_.damping >= 1.0) {
            Zf.swap(Zn);
            Wf.swap(Wn);
        } else {
            double th = opts_.damping;
            for (int i = 0; i <= n_; ++i) {
                Zf[i] = th * Zn[i] + (1.0 - th) * Zf[i];
                Wf[i] = th * Wn[i] + (1.0 - th) * Wf[i];
            }
        }
        last_residual = (Zf[n_] - ZT).cwiseAbs().maxCoeff();

        if (change <= tol) {
            converged = true;
            break;
        }
        prev_change = change;
    }
    if (!converged)
        throw PicardDiverged("picard_max sweeps without reaching tolerance", -1, prev_change);

    FlowSolution sol;
    sol.grid = grid_;
    sol.m0 = m0_;
    sol.X = std::move(X);
    sol.Z = std::move(Zf);
    sol.A = std::move(A);
    sol.dXds = std::move(F);
    sol.dZds = std::move(Wf);
    sol.terminal_residual = last_residual;
    sol.picard_iterations = sweeps;
    sol.interval_boundaries = {grid_.t_start, grid_.t_end};
    sol.interval_sweeps = {sweeps};
    return sol;
}

void scan_cones(FlowSolution& sol, const ConstantCascade& cascade) {
    double worst = kInf;
    for (size_t i = 0; i < sol.X.size(); ++i) {
        double mu_norm = 0.0;
        for (int r = 0; r < sol.m0.n_points(); ++r)
            mu_norm += sol.m0.weights()[r] * sol.X[i].row(r).norm();
        for (int r = 0; r < sol.n_rows(); ++r) {
            double margin = cascade.cone_radius(sol.X[i].row(r).norm(), mu_norm) -
                            sol.Z[i].row(r).norm();
            worst = std::min(worst, margin);
        }
    }
    sol.worst_cone_margin = worst;
    sol.cone_ok = worst >= 0.0;
}

// ---------------------------------------------------------------------------
// Backward pasting.
// ---------------------------------------------------------------------------

struct MemoEntry {
    uint64_t key = 0;
    double tol = 0.0;
    std::shared_ptr<FlowSolution> sol;
};

struct IntervalMemo {
    std::list<MemoEntry> lru;              // front = most recently used
    std::shared_ptr<FlowSolution> last;    // warm-start donor
};

struct PastingContext {
    const CoefficientModel& model;
    const ConstantCascade& cascade;
    SolverOptions opts;
    TimeGrid global;
    std::vector<int> bnodes;  // ascending node indices, front 0, back n_steps
    std::map<std::pair<int, int>, IntervalMemo> memos;
    TerminalMap final_terminal;
    long long total_sweeps = 0;
    const FlowSolution* donor = nullptr;  // validated same-grid warm start
};

constexpr int kMemoCap = 8;

uint64_t hash_rows(const Mat& rows) {
    uint64_t h = 1469598103934665603ull;
    h = fnv1a_mix(h, (long long)rows.rows());
    h = fnv1a_mix(h, (long long)rows.cols());
    for (Eigen::Index i = 0; i < rows.rows(); ++i)
        for (Eigen::Index j = 0; j < rows.cols(); ++j)
            h = fnv1a_mix(h, quantize(rows(i, j), 1e12));
    return h;
}

// Node range [a, b] of a whole-horizon solution as a standalone segment, fit
// to serve as an engine warm-start donor for that interval.
std::shared_ptr<FlowSolution> slice_solution(const FlowSolution& whole, const TimeGrid& g,
                                             int a, int b) {
    auto s = std::make_shared<FlowSolution>();
    s->grid = TimeGrid(g.node(a), g.node(b), b - a);
    s->m0 = whole.measure_at(a);
    auto cut = [a, b](const std::vector<Mat>& src, std::vector<Mat>& dst) {
        dst.assign(src.begin() + a, src.begin() + b + 1);
    };
    cut(whole.X, s->X);
    cut(whole.Z, s->Z);
    cut(whole.A, s->A);
    cut(whole.dXds, s->dXds);
    cut(whole.dZds, s->dZds);
    return s;
}

std::shared_ptr<FlowSolution> solve_interval(PastingContext& ctx, int idx,
                                             const EmpiricalMeasure& cloud, double tol,
                                             const TerminalMap& term, uint64_t term_key) {
    const int a = ctx.bnodes[idx];
    const int b = ctx.bnodes[idx + 1];
    IntervalMemo& memo = ctx.memos[{a, b}];

    const uint64_t key = hash_cloud(cloud) ^ (term_key * 0x9e3779b97f4a7c15ull);
    for (auto it = memo.lru.begin(); it != memo.lru.end(); ++it) {
        if (it->key == key && it->tol <= tol * (1.0 + 1e-9)) {
            memo.lru.splice(memo.lru.begin(), memo.lru, it);
            return memo.lru.front().sol;
        }
    }

    TimeGrid gi(ctx.global.node(a), ctx.global.node(b), b - a);
    SweepEngine engine(ctx.model, ctx.cascade, ctx.opts, gi, cloud);
    FlowSolution sol;
    try {
        sol = engine.run(term, tol, memo.last.get());
    } catch (PicardDiverged& e) {
        if (e.interval_index < 0) throw PicardDiverged(e.what(), idx, e.change);
        throw;
    } catch (const NewtonDiverged& e) {
        throw PicardDiverged(std::string("control solve failed inside sweep: ") + e.what(), idx,
                             kInf);
    } catch (const SingularHessian& e) {
        throw PicardDiverged(std::string("control solve failed inside sweep: ") + e.what(), idx,
                             kInf);
    }
    ctx.total_sweeps += sol.picard_iterations;

    auto sp = std::make_shared<FlowSolution>(std::move(sol));
    memo.last = sp;
    memo.lru.push_front(MemoEntry{key, tol, sp});
    while (memo.lru.size() > kMemoCap) memo.lru.pop_back();
    return sp;
}

// Slopes of the decoupling field at every interval start along the current
// pasted trajectory; defined next to the variational machinery below.
std::vector<std::vector<Mat>> chain_gains(const CoefficientModel& model,
                                          const ConstantCascade& cascade,
                                          const std::vector<std::shared_ptr<FlowSolution>>& segs);

// One pasting fixed point, iterated by global rounds.  Every round runs a
// backward field pass, where each interval is re-solved against the freshly
// updated field data of its successor so terminal information crosses the
// whole partition in a single round, and then a forward cloud pass, where the
// intervals are re-solved left to right from exactly chained starting clouds.
// The terminal condition an interval sees is the decoupling-field value of
// recursively solving the later segments, frozen as an affine map around the
// successor's sampled start rows: the per-row slope matrices carry the field
// to first order when arrival rows drift between rounds, so the update error
// is second order in the round-to-round change and the rounds contract
// without damping.  A constant freeze would sever that feedback and turn the
// forward chain into unstable open-loop shooting.  The slopes are the chained
// variational factors of the later segments, refreshed from the freshest
// trajectories after every forward pass.  Cost stays linear in the interval
// count, where querying the later segments anew on every inner sweep would
// blow up exponentially; when the rounds settle to picard_tol the frozen maps
// agree with the recursive fixed point to the same tolerance.  The first
// round has no field data yet and bootstraps by extending the terminal slope
// to every boundary.
std::vector<std::shared_ptr<FlowSolution>> run_rounds(PastingContext& ctx,
                                                      const EmpiricalMeasure& m) {
    const int K = int(ctx.bnodes.size()) - 1;
    std::vector<std::shared_ptr<FlowSolution>> segs(K);
    if (K == 1) {
        if (ctx.donor)
            ctx.memos[{0, ctx.global.n_steps}].last =
                slice_solution(*ctx.donor, ctx.global, 0, ctx.global.n_steps);
        segs[0] = solve_interval(ctx, 0, m, ctx.opts.picard_tol, ctx.final_terminal, 0);
        return segs;
    }

    // Field data at interval starts, at most one pass stale: value rows, the
    // rows they were sampled at, and the per-row slopes.
    std::vector<Mat> zrows(K), xrows(K);
    std::vector<std::vector<Mat>> gains;
    std::vector<EmpiricalMeasure> start_clouds;
    const double ptol = ctx.opts.picard_tol;

    if (ctx.donor) {
        // The donor carries field data at every node, so all boundaries are
        // seeded at once and the rounds start within the donor-to-problem
        // distance instead of from the terminal-slope bootstrap.
        std::vector<std::shared_ptr<FlowSolution>> donor_segs(K);
        for (int idx = 0; idx < K; ++idx) {
            const int a = ctx.bnodes[idx];
            const int b = ctx.bnodes[idx + 1];
            donor_segs[idx] = slice_solution(*ctx.donor, ctx.global, a, b);
            ctx.memos[{a, b}].last = donor_segs[idx];
            zrows[idx] = ctx.donor->Z[std::size_t(a)];
            xrows[idx] = ctx.donor->X[std::size_t(a)];
            start_clouds.push_back(idx == 0 ? m : ctx.donor->measure_at(a));
        }
        gains = chain_gains(ctx.model, ctx.cascade, donor_segs);
    }

    auto terminal_for = [&](int idx) -> std::pair<TerminalMap, uint64_t> {
        if (idx + 1 == K) return {ctx.final_terminal, 0};
        if (zrows[idx + 1].size() == 0) return {ctx.final_terminal, 1};
        Mat z0 = zrows[idx + 1];
        Mat x0 = xrows[idx + 1];
        std::vector<Mat> G = gains[idx + 1];
        uint64_t tkey = hash_rows(z0);
        tkey = tkey * 0x100000001b3ull ^ hash_rows(x0);
        for (const Mat& g : G) tkey = tkey * 0x100000001b3ull ^ hash_rows(g);
        TerminalMap term = [z0 = std::move(z0), x0 = std::move(x0),
                            G = std::move(G)](const EmpiricalMeasure& arrived, double) {
            if (arrived.n_rows() != int(z0.rows()))
                throw ConfigError("pasted terminal saw a cloud of unexpected size");
            Mat Z = z0;
            for (int r = 0; r < int(Z.rows()); ++r) {
                Vec dx = arrived.row(r) - x0.row(r).transpose();
                Z.row(r) += dx.transpose() * G[r];
            }
            return Z;
        };
        return {term, tkey};
    };

    double prev_delta = kInf, cap = kInf;
    for (int round = 0; round < ctx.opts.picard_max; ++round) {
        const double tolr = std::max(ptol, std::min(1e-3, 0.005 * prev_delta));
        double delta = 0.0;
        int worst = 0;
        // A donor seed provides reference rows before any pass has run, so
        // the round-to-round distance is measurable from round zero and the
        // tolerance ladder starts from the donor-to-problem gap instead of
        // from the bootstrap scale.
        const bool have_delta = (round > 0) || !start_clouds.empty();

        if (round > 0) {
            for (int idx = K - 1; idx >= 0; --idx) {
                auto [term, tkey] = terminal_for(idx);
                auto sp = solve_interval(ctx, idx, start_clouds[idx], tolr, term, tkey);
                double move = (sp->Z[0] - zrows[idx]).cwiseAbs().maxCoeff();
                if (move > delta) {
                    delta = move;
                    worst = idx;
                }
                zrows[idx] = sp->Z[0];
                xrows[idx] = sp->X[0];
            }
        }

        std::vector<EmpiricalMeasure> new_starts;
        new_starts.reserve(K);
        EmpiricalMeasure cloud = m;
        for (int idx = 0; idx < K; ++idx) {
            auto [term, tkey] = terminal_for(idx);
            new_starts.push_back(cloud);
            auto sp = solve_interval(ctx, idx, cloud, tolr, term, tkey);
            if (have_delta) {
                double move =
                    std::max((sp->Z[0] - zrows[idx]).cwiseAbs().maxCoeff(),
                             (stack_rows(cloud) - stack_rows(start_clouds[idx]))
                                 .cwiseAbs()
                                 .maxCoeff());
                if (move > delta) {
                    delta = move;
                    worst = idx;
                }
            }
            zrows[idx] = sp->Z[0];
            xrows[idx] = sp->X[0];
            segs[idx] = sp;
            cloud = sp->measure_at(sp->grid.n_steps);
        }
        start_clouds = std::move(new_starts);
        gains = chain_gains(ctx.model, ctx.cascade, segs);

        if (have_delta) {
            if (!std::isfinite(delta))
                throw PicardDiverged("pasting rounds produced a non-finite update", worst,
                                     delta);
            if (delta > cap)
                throw PicardDiverged("pasting rounds are growing", worst, delta);
            if (cap == kInf) cap = 1e6 * std::max(1.0, delta);
            if (delta <= ptol && tolr <= ptol * (1.0 + 1e-12)) return segs;
            prev_delta = delta;
        }
    }
    throw PicardDiverged("pasting rounds exhausted picard_max", 0, prev_delta);
}

std::vector<int> initial_partition(int n_total, double h, double epsilon_init) {
    long long step = std::llround(epsilon_init / h);
    step = std::max(1ll, std::min<long long>(step, n_total));
    std::vector<int> bnodes;
    for (long long b = n_total; b > 0; b -= step) bnodes.push_back(int(b));
    bnodes.push_back(0);
    std::reverse(bnodes.begin(), bnodes.end());
    return bnodes;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public surface.
// ---------------------------------------------------------------------------

TimeGrid::TimeGrid(double t0, double t1, int n) : t_start(t0), t_end(t1), n_steps(n) {
    if (!(std::isfinite(t0) && std::isfinite(t1)) || !(t1 > t0))
        throw ConfigError("time grid requires finite t_start < t_end");
    if (n < 1) throw ConfigError("time grid requires at least one step");
}

EmpiricalMeasure FlowSolution::measure_at(int node) const {
    const Mat& rows = X.at(size_t(node));
    int N = m0.n_points();
    if (rows.rows() > N)
        return EmpiricalMeasure(rows.topRows(N), m0.weights(), rows.bottomRows(rows.rows() - N));
    return EmpiricalMeasure(rows, m0.weights());
}

TerminalMap lift_terminal(const CoefficientModel& model, TerminalPointwise p) {
    (void)model;
    return [p = std::move(p)](const EmpiricalMeasure& arrived, double) -> Mat {
        Mat Z(arrived.n_rows(), arrived.dim());
        for (int r = 0; r < arrived.n_rows(); ++r)
            Z.row(r) = p(arrived.row(r), arrived).transpose();
        return Z;
    };
}

TerminalMap terminal_from_dx_k(const CoefficientModel& model) {
    return [&model](const EmpiricalMeasure& arrived, double) -> Mat {
        Mat Z(arrived.n_rows(), arrived.dim());
        for (int r = 0; r < arrived.n_rows(); ++r)
            Z.row(r) = model.dx_k(arrived.row(r), arrived).transpose();
        return Z;
    };
}

FlowSolution solve_local(const CoefficientModel& model, const ConstantCascade& cascade,
                         const EmpiricalMeasure& m, const TimeGrid& grid,
                         const TerminalMap& terminal_p, const SolverOptions& opts) {
    SweepEngine engine(model, cascade, opts, grid, m);
    FlowSolution sol = engine.run(terminal_p, opts.picard_tol, opts.warm_start);
    scan_cones(sol, cascade);
    return sol;
}

FlowSolution solve_local(const CoefficientModel& model, const ConstantCascade& cascade,
                         const EmpiricalMeasure& m, const TimeGrid& grid,
                         const TerminalPointwise& terminal_p, const SolverOptions& opts) {
    return solve_local(model, cascade, m, grid, lift_terminal(model, terminal_p), opts);
}

FlowSolution solve_global(const CoefficientModel& model, const ConstantCascade& cascade,
                          const EmpiricalMeasure& m, double t0, double T, double dt,
                          const SolverOptions& opts) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("dt must be positive");
    if (!(T > t0)) throw ConfigError("horizon requires t0 < T");
    if (!(opts.epsilon_min > 0.0) || opts.epsilon_init < opts.epsilon_min)
        throw ConfigError("epsilon_init must be >= epsilon_min > 0");

    const long long n_total = std::max(1ll, std::llround((T - t0) / dt));
    if (n_total > 50'000'000ll) throw ConfigError("dt is too small for this horizon");
    TimeGrid global(t0, T, int(n_total));
    const double h = global.dt();

    // A warm-start donor is honored only when it matches this problem's grid
    // and row layout exactly; near misses (shifted horizons, added probes)
    // quietly fall back to a cold start.
    const FlowSolution* donor = opts.warm_start;
    if (donor) {
        const double tscale = std::max({1.0, std::fabs(t0), std::fabs(T)});
        bool usable = donor->grid.n_steps == int(n_total) &&
                      std::fabs(donor->grid.t_start - t0) <= 1e-9 * tscale &&
                      std::fabs(donor->grid.t_end - T) <= 1e-9 * tscale &&
                      donor->n_rows() == m.n_rows() && donor->d() == m.dim() &&
                      donor->interval_boundaries.size() >= 2;
        if (!usable) donor = nullptr;
    }
    std::vector<int> partition;
    if (donor) {
        partition.reserve(donor->interval_boundaries.size());
        for (double bt : donor->interval_boundaries)
            partition.push_back(int(std::llround((bt - t0) / h)));
        bool ascending = partition.front() == 0 && partition.back() == int(n_total);
        for (std::size_t i = 1; ascending && i < partition.size(); ++i)
            ascending = partition[i - 1] < partition[i];
        if (!ascending) {
            donor = nullptr;
            partition = initial_partition(int(n_total), h, opts.epsilon_init);
        }
    } else {
        partition = initial_partition(int(n_total), h, opts.epsilon_init);
    }

    PastingContext ctx{model, cascade, opts, global, std::move(partition),
                       {}, terminal_from_dx_k(model), 0, donor};

    const int max_splits = 200;
    std::vector<std::shared_ptr<FlowSolution>> segs;
    for (int attempt = 0;; ++attempt) {
        try {
            segs = run_rounds(ctx, m);
            break;
        } catch (PicardDiverged& e) {
            if (attempt >= max_splits) throw;
            int i = std::max(0, e.interval_index);
            if (i + 1 >= int(ctx.bnodes.size())) i = int(ctx.bnodes.size()) - 2;
            int a = ctx.bnodes[i], b = ctx.bnodes[i + 1];
            int mid = (a + b) / 2;
            if (mid == a || (mid - a) * h < opts.epsilon_min - 1e-12 ||
                (b - mid) * h < opts.epsilon_min - 1e-12)
                throw IntervalUnderflow(
                    "interval splitting reached epsilon_min without convergence");
            ctx.memos.erase({a, b});
            ctx.bnodes.insert(ctx.bnodes.begin() + i + 1, mid);
        }
    }

    // Splice the final round's segments; starting clouds chain exactly within
    // one round, so the concatenation is continuous by construction.
    const int K = int(ctx.bnodes.size()) - 1;
    FlowSolution out;
    out.grid = global;
    out.m0 = m;
    out.X.assign(n_total + 1, Mat());
    out.Z.assign(n_total + 1, Mat());
    out.A.assign(n_total + 1, Mat());
    out.dXds.assign(n_total + 1, Mat());
    out.dZds.assign(n_total + 1, Mat());
    out.interval_boundaries.reserve(K + 1);
    for (int idx = 0; idx <= K; ++idx)
        out.interval_boundaries.push_back(global.node(ctx.bnodes[idx]));

    for (int idx = 0; idx < K; ++idx) {
        const auto& sp = segs[idx];
        const int a = ctx.bnodes[idx];
        const int ni = ctx.bnodes[idx + 1] - a;
        const int upto = (idx + 1 == K) ? ni : ni - 1;  // interior boundary: later owner
        for (int i = 0; i <= upto; ++i) {
            out.X[a + i] = sp->X[i];
            out.Z[a + i] = sp->Z[i];
            out.A[a + i] = sp->A[i];
            out.dXds[a + i] = sp->dXds[i];
            out.dZds[a + i] = sp->dZds[i];
        }
        out.interval_sweeps.push_back(sp->picard_iterations);
        if (idx + 1 == K) out.terminal_residual = sp->terminal_residual;
    }
    out.picard_iterations = int(std::min<long long>(ctx.total_sweeps, 1ll << 30));
    scan_cones(out, cascade);
    return out;
}

Vec eval_gamma(const CoefficientModel& model, const ConstantCascade& cascade, double t,
               const Vec& x, const EmpiricalMeasure& m, double T, double dt,
               const SolverOptions& opts) {
    if (T - t <= 1e-14 * std::max(1.0, std::fabs(T)))
        return model.dx_k(x, m);
    Mat probes(m.n_probes() + 1, m.dim());
    if (m.n_probes() > 0) probes.topRows(m.n_probes()) = m.probes();
    probes.bottomRows(1) = x.transpose();
    FlowSolution sol = solve_global(model, cascade, m.with_probes(probes), t, T, dt, opts);
    return sol.Z[0].row(sol.n_rows() - 1).transpose();
}

double flow_property_check(const CoefficientModel& model, const ConstantCascade& cascade,
                           const FlowSolution& solution, double t, double s, double tau,
                           const SolverOptions& opts) {
    const TimeGrid& grid = solution.grid;
    const double h = grid.dt();
    auto to_node = [&](double time, const char* name) {
        long long i = std::llround((time - grid.t_start) / h);
        if (i < 0 || i > grid.n_steps ||
            std::fabs(grid.node(int(i)) - time) > 1e-9 * std::max(1.0, std::fabs(time)))
            throw ConfigError(std::string(name) + " must lie on the solution grid");
        return int(i);
    };
    if (std::fabs(t - grid.t_start) > 1e-9 * std::max(1.0, std::fabs(t)))
        throw ConfigError("t must equal the solution's start time");
    const int is = to_node(s, "s");
    const int itau = to_node(tau, "tau");
    if (itau < is) throw ConfigError("tau must not precede s");
    if (is == itau) return 0.0;

    FlowSolution sub =
        solve_global(model, cascade, solution.measure_at(is), grid.node(is), grid.t_end, h, opts);
    return (sub.X[itau - is] - solution.X[itau]).cwiseAbs().maxCoeff();
}

std::string trajectory_csv(const FlowSolution& solution) {
    const int R = solution.n_rows();
    const int N = solution.m0.n_points();
    const int d = solution.d();
    const int da = solution.A.empty() ? 0 : int(solution.A[0].cols());
    char buf[64];
    auto g17 = [&buf](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::string out = "s,id,kind";
    for (int j = 1; j <= d; ++j) out += ",X_" + std::to_string(j);
    for (int j = 1; j <= d; ++j) out += ",Z_" + std::to_string(j);
    for (int j = 1; j <= da; ++j) out += ",alpha_" + std::to_string(j);
    out += "\n";
    for (int i = 0; i < int(solution.X.size()); ++i) {
        for (int r = 0; r < R; ++r) {
            out += g17(solution.grid.node(i));
            out += "," + std::to_string(r);
            out += r < N ? ",point" : ",probe";
            for (int j = 0; j < d; ++j) out += "," + g17(solution.X[i](r, j));
            for (int j = 0; j < d; ++j) out += "," + g17(solution.Z[i](r, j));
            for (int j = 0; j < da; ++j) out += "," + g17(solution.A[i](r, j));
            out += "\n";
        }
    }
    return out;
}

double nash_gap(const CoefficientModel& model, const ConstantCascade& cascade,
                const FlowSolution& solution, const SolverOptions& opts) {
    SweepEngine engine(model, cascade, opts, solution.grid, solution.m0);
    std::vector<Mat> X, F;
    std::vector<EmpiricalMeasure> node_m;
    std::vector<Vec> warm_alpha(solution.n_rows(), Vec::Zero(model.d_alpha));
    engine.forward_pass(solution.Z, solution.dZds, X, F, node_m, warm_alpha);

    const int N = solution.m0.n_points();
    double gap = 0.0;
    for (size_t i = 0; i < X.size(); ++i) {
        EmpiricalMeasure replay(X[i].topRows(N), solution.m0.weights());
        EmpiricalMeasure stored(solution.X[i].topRows(N), solution.m0.weights());
        gap = std::max(gap, wasserstein(replay, stored, 1));
    }
    return gap;
}

// ---------------------------------------------------------------------------
// Variational flows.
// ---------------------------------------------------------------------------

namespace {

// Linearization coefficients of the characteristic system at one evaluation
// point (x, mu, z), all in the (i,j) = d out_j / d in_i orientation:
//   dU/ds = U Af + V Bf,   dV/ds = -(U GX + V GZ).
struct RowCoeffs {
    Mat Af, Bf, GX, GZ;
};

struct StagePoint {
    std::vector<RowCoeffs> row;          // per particle row
    std::vector<std::vector<Mat>> Cf;    // coupling: [row][source] d/dmu of the drift
    std::vector<std::vector<Mat>> GM;    // coupling for the costate RHS
};

RowCoeffs row_coeffs(const CoefficientModel& model, const ConstantCascade& cascade, const Vec& x,
                     const EmpiricalMeasure& mu, const Vec& z, Vec& warm,
                     const ControlOptions& copts, ControlDerivatives* cd_out) {
    ControlDerivatives cd = control_derivatives(model, cascade, x, mu, z, &warm, copts);
    warm = cd.alpha_hat;
    const Vec& a = cd.alpha_hat;
    Mat dxf = model.dx_f(x, mu, a);
    Mat daf = model.da_f(x, mu, a);
    Mat Qt = (model.dxda_f_dot(x, mu, a, z) + model.dxda_g(x, mu, a)).transpose();
    RowCoeffs rc;
    rc.Af = dxf + cd.dx_alpha * daf;
    rc.Bf = cd.dz_alpha * daf;
    rc.GX = model.dxdx_f_dot(x, mu, a, z) + model.dxdx_g(x, mu, a) + cd.dx_alpha * Qt;
    rc.GZ = cd.dz_alpha * Qt + dxf.transpose();
    if (cd_out) *cd_out = std::move(cd);
    return rc;
}

// Fills the measure-coupling blocks of one row against every point particle.
void fill_couplings(const CoefficientModel& model, const ControlDerivatives& cd, const Vec& x,
                    const EmpiricalMeasure& mu, const Vec& z, const Mat& daf, const Mat& Qt,
                    std::vector<Mat>& Cf, std::vector<Mat>& GM) {
    const int N = mu.n_points();
    Cf.resize(N);
    GM.resize(N);
    const Vec& a = cd.alpha_hat;
    for (int l = 0; l < N; ++l) {
        Vec xt = mu.point(l);
        Mat dmua = dmu_alpha(model, cd, x, mu, z, xt);
        Cf[l] = model.dmu_f(x, mu, a, xt) + dmua * daf;
        GM[l] = model.dmudx_f_dot(x, mu, a, xt, z) + model.dmudx_g(x, mu, a, xt) + dmua * Qt;
    }
}

struct Trajectory {
    // Stage-point views of the stored solution: index 2i = node i, 2i+1 = the
    // Hermite midpoint of step i.
    std::vector<Mat> Xs, Zs;
    std::vector<EmpiricalMeasure> mus;
    int n = 0;
    double h = 0.0;
};

Trajectory stage_trajectory(const FlowSolution& sol, int a, int b) {
    Trajectory tr;
    tr.n = b - a;
    tr.h = sol.grid.dt();
    tr.Xs.resize(2 * tr.n + 1);
    tr.Zs.resize(2 * tr.n + 1);
    tr.mus.resize(2 * tr.n + 1);
    const int N = sol.m0.n_points();
    auto cloud_of = [&](const Mat& rows) {
        if (rows.rows() > N)
            return EmpiricalMeasure(rows.topRows(N), sol.m0.weights(),
                                    rows.bottomRows(rows.rows() - N));
        return EmpiricalMeasure(rows, sol.m0.weights());
    };
    for (int i = 0; i <= tr.n; ++i) {
        tr.Xs[2 * i] = sol.X[a + i];
        tr.Zs[2 * i] = sol.Z[a + i];
        tr.mus[2 * i] = (a + i == 0) ? sol.m0 : cloud_of(sol.X[a + i]);
        if (i < tr.n) {
            tr.Xs[2 * i + 1] =
                hermite_mid(sol.X[a + i], sol.dXds[a + i], sol.X[a + i + 1], sol.dXds[a + i + 1],
                            tr.h);
            tr.Zs[2 * i + 1] =
                hermite_mid(sol.Z[a + i], sol.dZds[a + i], sol.Z[a + i + 1], sol.dZds[a + i + 1],
                            tr.h);
            tr.mus[2 * i + 1] = cloud_of(tr.Xs[2 * i + 1]);
        }
    }
    return tr;
}

std::vector<int> boundary_nodes(const FlowSolution& sol) {
    std::vector<int> nodes;
    const double h = sol.grid.dt();
    for (double b : sol.interval_boundaries) {
        int i = int(std::llround((b - sol.grid.t_start) / h));
        nodes.push_back(std::max(0, std::min(sol.grid.n_steps, i)));
    }
    if (nodes.empty() || nodes.front() != 0 || nodes.back() != sol.grid.n_steps)
        throw ConfigError("solution carries no usable interval boundaries");
    return nodes;
}

// Per-interval Picard for the per-row linear variational system. U and V are
// indexed by local node; terminal V = U(end) * Mterm.
struct RowVariational {
    std::vector<Mat> U, V;
};

RowVariational solve_row_variational(const std::vector<const RowCoeffs*>& C, int n, double h,
                                     const Mat& Mterm, int d, const JacobianOptions& opts) {
    auto rhs_u = [&](int sp, const Mat& U, const Mat& V) { return U * C[sp]->Af + V * C[sp]->Bf; };
    auto rhs_v = [&](int sp, const Mat& U, const Mat& V) {
        return Mat(-(U * C[sp]->GX + V * C[sp]->GZ));
    };

    std::vector<Mat> Vf(n + 1, Mterm), Wv(n + 1, Mat::Zero(d, d));
    std::vector<Mat> U(n + 1), Us(n + 1), Vn(n + 1), Wn(n + 1);
    double prev_change = kInf, cap = kInf;
    for (int iter = 0; iter < opts.max_sweeps; ++iter) {
        U[0] = Mat::Identity(d, d);
        for (int i = 0; i < n; ++i) {
            Mat Vmid = hermite_mid(Vf[i], Wv[i], Vf[i + 1], Wv[i + 1], h);
            Mat k1 = rhs_u(2 * i, U[i], Vf[i]);
            Us[i] = k1;
            Mat k2 = rhs_u(2 * i + 1, U[i] + (h / 2.0) * k1, Vmid);
            Mat k3 = rhs_u(2 * i + 1, U[i] + (h / 2.0) * k2, Vmid);
            Mat k4 = rhs_u(2 * i + 2, U[i] + h * k3, Vf[i + 1]);
            U[i + 1] = U[i] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        Us[n] = rhs_u(2 * n, U[n], Vf[n]);

        Vn[n] = U[n] * Mterm;
        Wn[n] = rhs_v(2 * n, U[n], Vn[n]);
        for (int i = n - 1; i >= 0; --i) {
            Mat Umid = hermite_mid(U[i], Us[i], U[i + 1], Us[i + 1], h);
            const Mat& l1 = Wn[i + 1];
            Mat l2 = rhs_v(2 * i + 1, Umid, Vn[i + 1] - (h / 2.0) * l1);
            Mat l3 = rhs_v(2 * i + 1, Umid, Vn[i + 1] - (h / 2.0) * l2);
            Mat l4 = rhs_v(2 * i, U[i], Vn[i + 1] - h * l3);
            Vn[i] = Vn[i + 1] - (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
            Wn[i] = rhs_v(2 * i, U[i], Vn[i]);
        }

        double change = max_abs_diff(Vn, Vf);
        if (!std::isfinite(change) || change > cap)
            throw PicardDiverged("variational sweep diverged", -1, change);
        if (prev_change == kInf) cap = 1e6 * std::max(1.0, change);
        if (opts.damping >= 1.0) {
            Vf.swap(Vn);
            Wv.swap(Wn);
        } else {
            for (int i = 0; i <= n; ++i) {
                Vf[i] = opts.damping * Vn[i] + (1.0 - opts.damping) * Vf[i];
                Wv[i] = opts.damping * Wn[i] + (1.0 - opts.damping) * Wv[i];
            }
        }
        if (change <= opts.tol) return RowVariational{std::move(U), std::move(Vf)};
        prev_change = change;
    }
    throw PicardDiverged("variational sweep hit max_sweeps", -1, prev_change);
}

// gains[idx][r] is d gamma / dx at row r at the start of interval idx,
// chained backward through the later segments exactly like the terminal
// factor of the state-direction jacobian.  Divergence of a per-interval
// variational sweep is tagged with the interval so the caller can split it.
std::vector<std::vector<Mat>> chain_gains(const CoefficientModel& model,
                                          const ConstantCascade& cascade,
                                          const std::vector<std::shared_ptr<FlowSolution>>& segs) {
    const int K = int(segs.size());
    const int R = segs[0]->n_rows();
    const int d = segs[0]->d();
    JacobianOptions opts;
    ControlOptions copts;
    std::vector<std::vector<Mat>> gains(K, std::vector<Mat>(R));
    std::vector<Mat> Mnext(R);
    for (int idx = K - 1; idx >= 0; --idx) {
        const FlowSolution& seg = *segs[idx];
        const int n = seg.grid.n_steps;
        Trajectory tr = stage_trajectory(seg, 0, n);
        std::vector<std::vector<RowCoeffs>> coeffs(2 * n + 1, std::vector<RowCoeffs>(R));
        std::vector<Vec> warm(R, Vec::Zero(model.d_alpha));
        for (int sp = 0; sp <= 2 * n; ++sp)
            for (int r = 0; r < R; ++r)
                coeffs[sp][r] = row_coeffs(model, cascade, tr.Xs[sp].row(r).transpose(),
                                           tr.mus[sp], tr.Zs[sp].row(r).transpose(), warm[r],
                                           copts, nullptr);
        try {
            for (int r = 0; r < R; ++r) {
                Mat Mterm = (idx + 1 == K)
                                ? Mat(model.dxdx_k(seg.X[n].row(r).transpose(), tr.mus[2 * n]))
                                : Mnext[r];
                std::vector<const RowCoeffs*> C(2 * n + 1);
                for (int sp = 0; sp <= 2 * n; ++sp) C[sp] = &coeffs[sp][r];
                RowVariational rv = solve_row_variational(C, n, tr.h, Mterm, d, opts);
                Mnext[r] = rv.V[0];
                gains[idx][r] = rv.V[0];
            }
        } catch (PicardDiverged& e) {
            if (e.interval_index < 0) throw PicardDiverged(e.what(), idx, e.change);
            throw;
        }
    }
    return gains;
}

}  // namespace

JacobianFlow jacobian_flow_x(const CoefficientModel& model, const ConstantCascade& cascade,
                             const FlowSolution& solution, const JacobianOptions& opts) {
    const int R = solution.n_rows();
    const int d = solution.d();
    const int n = solution.grid.n_steps;
    const long long need = 2ll * (n + 1) * R * d * d + 8ll * (2 * n + 1) * R * d * d;
    if (need > opts.storage_cap)
        throw CapExceeded("state-direction jacobian would exceed the storage cap");

    JacobianFlow out;
    out.grid = solution.grid;
    out.slice = -1;
    out.dX.assign(n + 1, std::vector<Mat>(R));
    out.dZ.assign(n + 1, std::vector<Mat>(R));

    std::vector<int> bn = boundary_nodes(solution);
    const int K = int(bn.size()) - 1;
    ControlOptions copts;

    // Raw per-interval factors, later chained by prefix products.
    std::vector<Mat> Mnext(R);  // d gamma/dx of the chain after the interval
    std::vector<std::vector<std::vector<Mat>>> rawU(K), rawV(K);
    std::vector<std::vector<Mat>> Uend(K, std::vector<Mat>(R));

    for (int idx = K - 1; idx >= 0; --idx) {
        const int a = bn[idx], b = bn[idx + 1];
        Trajectory tr = stage_trajectory(solution, a, b);

        // Coefficients for every row at every stage point of this interval.
        std::vector<std::vector<RowCoeffs>> coeffs(2 * tr.n + 1, std::vector<RowCoeffs>(R));
        std::vector<Vec> warm(R, Vec::Zero(model.d_alpha));
        for (int sp = 0; sp <= 2 * tr.n; ++sp)
            for (int r = 0; r < R; ++r)
                coeffs[sp][r] =
                    row_coeffs(model, cascade, tr.Xs[sp].row(r).transpose(), tr.mus[sp],
                               tr.Zs[sp].row(r).transpose(), warm[r], copts, nullptr);

        rawU[idx].assign(R, {});
        rawV[idx].assign(R, {});
        for (int r = 0; r < R; ++r) {
            Mat Mterm = (idx + 1 == K)
                            ? Mat(model.dxdx_k(solution.X[b].row(r).transpose(), tr.mus[2 * tr.n]))
                            : Mnext[r];
            std::vector<const RowCoeffs*> C(2 * tr.n + 1);
            for (int sp = 0; sp <= 2 * tr.n; ++sp) C[sp] = &coeffs[sp][r];
            RowVariational rv = solve_row_variational(C, tr.n, tr.h, Mterm, d, opts);
            Uend[idx][r] = rv.U[tr.n];
            Mnext[r] = rv.V[0];
            rawU[idx][r] = std::move(rv.U);
            rawV[idx][r] = std::move(rv.V);
        }
    }

    std::vector<Mat> P(R, Mat::Identity(d, d));
    for (int idx = 0; idx < K; ++idx) {
        const int a = bn[idx], b = bn[idx + 1];
        const int upto = (idx + 1 == K) ? b - a : b - a - 1;
        for (int r = 0; r < R; ++r) {
            for (int i = 0; i <= upto; ++i) {
                out.dX[a + i][r] = P[r] * rawU[idx][r][i];
                out.dZ[a + i][r] = P[r] * rawV[idx][r][i];
            }
            P[r] = P[r] * Uend[idx][r];
        }
    }
    return out;
}

JacobianFlow jacobian_flow_m(const CoefficientModel& model, const ConstantCascade& cascade,
                             const FlowSolution& solution, int j, const JacobianFlow& jac_x,
                             const JacobianOptions& opts) {
    const int R = solution.n_rows();
    const int N = solution.m0.n_points();
    const int d = solution.d();
    const int n = solution.grid.n_steps;
    if (j < 0 || j >= N) throw ConfigError("measure direction requires a point particle index");
    const double wj = solution.m0.weights()[j];
    if (!(wj > 0.0)) throw ConfigError("measure direction requires positive particle weight");
    if (int(jac_x.dX.size()) != n + 1 || int(jac_x.dX[0].size()) != R)
        throw ConfigError("state-direction jacobian does not match the solution");
    if (R > 256) throw CapExceeded("measure-direction jacobian row cap is 256");
    const long long need = 2ll * (n + 1) * R * d * d + (2ll * n + 1) * R * (4 + 2ll * N) * d * d;
    if (need > opts.storage_cap)
        throw CapExceeded("measure-direction jacobian would exceed the storage cap");

    Trajectory tr = stage_trajectory(solution, 0, n);
    ControlOptions copts;

    // Coefficients plus measure couplings at every stage point.
    std::vector<StagePoint> sps(2 * n + 1);
    {
        std::vector<Vec> warm(R, Vec::Zero(model.d_alpha));
        for (int sp = 0; sp <= 2 * n; ++sp) {
            sps[sp].row.resize(R);
            sps[sp].Cf.resize(R);
            sps[sp].GM.resize(R);
            for (int r = 0; r < R; ++r) {
                Vec x = tr.Xs[sp].row(r).transpose();
                Vec z = tr.Zs[sp].row(r).transpose();
                ControlDerivatives cd;
                sps[sp].row[r] = row_coeffs(model, cascade, x, tr.mus[sp], z, warm[r], copts, &cd);
                Mat daf = model.da_f(x, tr.mus[sp], cd.alpha_hat);
                Mat Qt = (model.dxda_f_dot(x, tr.mus[sp], cd.alpha_hat, z) +
                          model.dxda_g(x, tr.mus[sp], cd.alpha_hat))
                             .transpose();
                fill_couplings(model, cd, x, tr.mus[sp], z, daf, Qt, sps[sp].Cf[r],
                               sps[sp].GM[r]);
            }
        }
    }
    const Vec& w = solution.m0.weights();

    using Rows = std::vector<Mat>;  // one d x d block per row
    auto rhs_u = [&](int sp, const Rows& U, const Rows& V) {
        Rows K(R);
        for (int r = 0; r < R; ++r) {
            K[r] = U[r] * sps[sp].row[r].Af + V[r] * sps[sp].row[r].Bf;
            for (int l = 0; l < N; ++l) K[r] += w[l] * U[l] * sps[sp].Cf[r][l];
        }
        return K;
    };
    auto rhs_v = [&](int sp, const Rows& U, const Rows& V) {
        Rows K(R);
        for (int r = 0; r < R; ++r) {
            K[r] = -(U[r] * sps[sp].row[r].GX + V[r] * sps[sp].row[r].GZ);
            for (int l = 0; l < N; ++l) K[r] -= w[l] * U[l] * sps[sp].GM[r][l];
        }
        return K;
    };
    auto axpy = [&](const Rows& a, double c, const Rows& b) {
        Rows out(R);
        for (int r = 0; r < R; ++r) out[r] = a[r] + c * b[r];
        return out;
    };
    auto terminal_v = [&](const Rows& UT) {
        Rows VT(R);
        for (int r = 0; r < R; ++r) {
            Vec x = solution.X[n].row(r).transpose();
            VT[r] = UT[r] * model.dxdx_k(x, tr.mus[2 * n]);
            for (int l = 0; l < N; ++l)
                VT[r] += w[l] * UT[l] * model.dmudx_k(x, tr.mus[2 * n], tr.mus[2 * n].point(l));
        }
        return VT;
    };

    const Mat Z0 = Mat::Zero(d, d);
    std::vector<Rows> Vf(n + 1, Rows(R, Z0)), Wv(n + 1, Rows(R, Z0));
    std::vector<Rows> U(n + 1), Us(n + 1), Vn(n + 1), Wn(n + 1);
    double theta = opts.damping;
    double prev_change = kInf, cap = kInf;
    bool converged = false;
    for (int iter = 0; iter < opts.max_sweeps && !converged; ++iter) {
        U[0].assign(R, Z0);
        U[0][j] = Mat::Identity(d, d);
        for (int i = 0; i < n; ++i) {
            Rows Vmid(R);
            for (int r = 0; r < R; ++r)
                Vmid[r] = hermite_mid(Vf[i][r], Wv[i][r], Vf[i + 1][r], Wv[i + 1][r], tr.h);
            Rows k1 = rhs_u(2 * i, U[i], Vf[i]);
            Us[i] = k1;
            Rows k2 = rhs_u(2 * i + 1, axpy(U[i], tr.h / 2.0, k1), Vmid);
            Rows k3 = rhs_u(2 * i + 1, axpy(U[i], tr.h / 2.0, k2), Vmid);
            Rows k4 = rhs_u(2 * i + 2, axpy(U[i], tr.h, k3), Vf[i + 1]);
            U[i + 1].resize(R);
            for (int r = 0; r < R; ++r)
                U[i + 1][r] = U[i][r] + (tr.h / 6.0) * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
        }
        Us[n] = rhs_u(2 * n, U[n], Vf[n]);

        Vn[n] = terminal_v(U[n]);
        Wn[n] = rhs_v(2 * n, U[n], Vn[n]);
        for (int i = n - 1; i >= 0; --i) {
            Rows Umid(R);
            for (int r = 0; r < R; ++r)
                Umid[r] = hermite_mid(U[i][r], Us[i][r], U[i + 1][r], Us[i + 1][r], tr.h);
            const Rows& l1 = Wn[i + 1];
            Rows l2 = rhs_v(2 * i + 1, Umid, axpy(Vn[i + 1], -tr.h / 2.0, l1));
            Rows l3 = rhs_v(2 * i + 1, Umid, axpy(Vn[i + 1], -tr.h / 2.0, l2));
            Rows l4 = rhs_v(2 * i, U[i], axpy(Vn[i + 1], -tr.h, l3));
            Vn[i].resize(R);
            for (int r = 0; r < R; ++r)
                Vn[i][r] =
                    Vn[i + 1][r] - (tr.h / 6.0) * (l1[r] + 2.0 * l2[r] + 2.0 * l3[r] + l4[r]);
            Wn[i] = rhs_v(2 * i, U[i], Vn[i]);
        }

        double change = 0.0;
        for (int i = 0; i <= n; ++i)
            for (int r = 0; r < R; ++r) {
                double v = (Vn[i][r] - Vf[i][r]).cwiseAbs().maxCoeff();
                if (!(v <= change)) change = v;
            }
        if (!std::isfinite(change) || change > cap) {
            // The whole-horizon linear sweep map can sit outside the unit
            // disk on horizons the nonlinear solve had to paste; damping
            // restores contraction for a linear iteration, so restart at
            // half strength within the same sweep budget.
            theta *= 0.5;
            if (theta < 1.0 / 64.0)
                throw PicardDiverged("measure-direction variational sweep diverged", -1,
                                     change);
            for (int i = 0; i <= n; ++i) {
                Vf[i].assign(R, Z0);
                Wv[i].assign(R, Z0);
            }
            prev_change = kInf;
            cap = kInf;
            continue;
        }
        if (prev_change == kInf) cap = 1e6 * std::max(1.0, change);
        if (theta >= 1.0) {
            Vf.swap(Vn);
            Wv.swap(Wn);
        } else {
            for (int i = 0; i <= n; ++i)
                for (int r = 0; r < R; ++r) {
                    Vf[i][r] = theta * Vn[i][r] + (1.0 - theta) * Vf[i][r];
                    Wv[i][r] = theta * Wn[i][r] + (1.0 - theta) * Wv[i][r];
                }
        }
        converged = change <= opts.tol;
        prev_change = change;
    }
    if (!converged)
        throw PicardDiverged("measure-direction variational sweep hit max_sweeps", -1,
                             prev_change);

    // Weight-rescale to the Lions derivative: subtract the transport part of
    // the nudged particle itself.
    JacobianFlow out;
    out.grid = solution.grid;
    out.slice = j;
    out.dX.assign(n + 1, std::vector<Mat>(R));
    out.dZ.assign(n + 1, std::vector<Mat>(R));
    for (int i = 0; i <= n; ++i)
        for (int r = 0; r < R; ++r) {
            Mat du = U[i][r];
            Mat dv = Vf[i][r];
            if (r == j) {
                du -= jac_x.dX[i][j];
                dv -= jac_x.dZ[i][j];
            }
            out.dX[i][r] = du / wj;
            out.dZ[i][r] = dv / wj;
        }
    return out;
}

}  // namespace mfg
