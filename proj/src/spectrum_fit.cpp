// Bounded Levenberg-Marquardt fit of the loss-spectrum model to a histogram.
// Sideband areas are free parameters; the coupling law is recovered from the
// first three normalized areas.
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

#include "fockherald/model.hpp"

namespace fockherald::model {

namespace {

enum Slot { kSigma = 0, kOmega, kPm, kProb, kDecay, kOffset, kFirstArea };

struct Problem {
    EnergyGrid centers;
    std::vector<double> counts;
    std::vector<double> weights;  // 1/sqrt(max(n, 1))
    double total = 0.0;
    int orders = 0;
    std::vector<bool> free;
    std::vector<double> lo, hi, typical;
};

SpectrumParams unpack(const Eigen::VectorXd& x, const SpectrumParams& base) {
    SpectrumParams p = base;
    p.zlp_sigma = x[kSigma];
    p.photon_energy = x[kOmega];
    p.pm_bandwidth = x[kPm];
    p.continuum_prob = x[kProb];
    p.continuum_decay = x[kDecay];
    return p;
}

Eigen::VectorXd residuals(const Problem& pr, const Eigen::VectorXd& x, const SpectrumParams& base) {
    const SpectrumParams p = unpack(x, base);
    std::vector<double> areas(static_cast<std::size_t>(pr.orders));
    for (int m = 0; m < pr.orders; ++m) areas[m] = x[kFirstArea + m];
    const auto dens = spectrum_density(p, areas, pr.centers, x[kOffset]);
    Eigen::VectorXd r(static_cast<Eigen::Index>(pr.centers.size));
    const double scale = pr.total * pr.centers.step;
    for (std::size_t i = 0; i < pr.centers.size; ++i) {
        r[static_cast<Eigen::Index>(i)] = (scale * dens[i] - pr.counts[i]) * pr.weights[i];
    }
    return r;
}

void clamp(const Problem& pr, Eigen::VectorXd& x) {
    for (Eigen::Index j = 0; j < x.size(); ++j) x[j] = std::clamp(x[j], pr.lo[j], pr.hi[j]);
}

Eigen::MatrixXd jacobian(const Problem& pr, const Eigen::VectorXd& x, const SpectrumParams& base) {
    const Eigen::Index n = static_cast<Eigen::Index>(pr.centers.size);
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        if (!pr.free[j]) continue;
        const double h = 1e-6 * std::max(std::abs(x[j]), pr.typical[j]);
        Eigen::VectorXd xp = x, xm = x;
        xp[j] = std::min(x[j] + h, pr.hi[j]);
        xm[j] = std::max(x[j] - h, pr.lo[j]);
        const double span = xp[j] - xm[j];
        if (span <= 0.0) continue;
        J.col(j) = (residuals(pr, xp, base) - residuals(pr, xm, base)) / span;
    }
    return J;
}

SpectrumFit fit_stage(const SpectrumHistogram& histogram, const SpectrumParams& init, const FitOptions& options,
                      const std::vector<double>* start_areas);

}  // namespace

SpectrumFit fit_spectrum(const SpectrumHistogram& histogram, const SpectrumParams& init,
                         const FitOptions& options) {
    validate(init);
    if (!options.fit_continuum) return fit_stage(histogram, init, options, nullptr);
    // A short-decay continuum can mimic a broadened zero-loss peak, so the peak
    // shapes are settled first with the continuum held at its initial value.
    FitOptions first = options;
    first.fit_continuum = false;
    const SpectrumFit settled = fit_stage(histogram, init, first, nullptr);
    SpectrumParams start = settled.params;
    start.continuum_prob = init.continuum_prob;
    start.continuum_decay = init.continuum_decay;
    SpectrumFit fit = fit_stage(histogram, start, options, &settled.populations.p);
    fit.iterations += settled.iterations;
    std::ostringstream msg;
    msg << (fit.converged ? "converged" : "not converged") << " after " << fit.iterations
        << " iterations, reduced chi2 " << fit.reduced_chi2;
    fit.message = msg.str();
    return fit;
}

namespace {

SpectrumFit fit_stage(const SpectrumHistogram& histogram, const SpectrumParams& init, const FitOptions& options,
                      const std::vector<double>* start_areas) {
    const std::size_t nb = histogram.counts.size();
    if (nb < 8 || histogram.edges.size() != nb + 1) {
        throw std::invalid_argument("fit_spectrum: histogram needs n >= 8 bins and n + 1 edges");
    }
    std::vector<double> centers(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        if (!(histogram.counts[i] >= 0.0)) throw std::invalid_argument("fit_spectrum: counts must be non-negative");
        centers[i] = 0.5 * (histogram.edges[i] + histogram.edges[i + 1]);
    }
    Problem pr;
    pr.centers = make_grid(centers);
    pr.counts = histogram.counts;
    pr.total = std::accumulate(pr.counts.begin(), pr.counts.end(), 0.0);
    if (!(pr.total > 0.0)) throw std::invalid_argument("fit_spectrum: empty histogram");
    const double e_max = histogram.edges.back();
    if (e_max < 2.0 * init.photon_energy) {
        throw std::invalid_argument("fit_spectrum: energy range must cover at least three sidebands");
    }
    pr.orders = options.max_order >= 0
                    ? options.max_order + 1
                    : static_cast<int>(std::floor(e_max / init.photon_energy)) + 2;
    pr.orders = std::max(pr.orders, 3);
    pr.weights.resize(nb);
    for (std::size_t i = 0; i < nb; ++i) pr.weights[i] = 1.0 / std::sqrt(std::max(pr.counts[i], 1.0));

    const int np = kFirstArea + pr.orders;
    Eigen::VectorXd x(np);
    x[kSigma] = init.zlp_sigma;
    x[kOmega] = init.photon_energy;
    x[kPm] = init.pm_bandwidth;
    x[kProb] = init.continuum_prob;
    x[kDecay] = init.continuum_decay;
    x[kOffset] = 0.0;
    const auto init_pops = mixed_sideband_populations(init.coupling, pr.orders - 1);
    for (int m = 0; m < pr.orders; ++m) x[kFirstArea + m] = std::max(init_pops.p[m], 1e-6);
    if (start_areas != nullptr && start_areas->size() == static_cast<std::size_t>(pr.orders)) {
        for (int m = 0; m < pr.orders; ++m) x[kFirstArea + m] = std::max((*start_areas)[m], 1e-6);
    }

    pr.free.assign(np, true);
    pr.free[kPm] = options.fit_pm_bandwidth;
    pr.free[kProb] = options.fit_continuum;
    pr.free[kDecay] = options.fit_continuum;
    pr.free[kOffset] = options.fit_offset;
    pr.lo = {1e-4, 0.01, 1e-6, 0.0, 1e-3, -5.0};
    pr.hi = {10.0, 100.0, 10.0, 1.0, 1e3, 5.0};
    pr.typical = {0.1, 1.0, 0.01, 0.1, 1.0, 0.1};
    for (int m = 0; m < pr.orders; ++m) {
        pr.lo.push_back(0.0);
        pr.hi.push_back(10.0);
        pr.typical.push_back(1e-3);
    }
    clamp(pr, x);

    SpectrumFit fit;
    Eigen::VectorXd r = residuals(pr, x, init);
    double chi2 = r.squaredNorm();
    double lambda = 1e-3;
    Eigen::MatrixXd J;
    bool stalled = false;
    int flat = 0;  // consecutive accepted steps with a negligible chi2 decrease
    for (int it = 0; it < options.max_iterations; ++it) {
        fit.iterations = it + 1;
        J = jacobian(pr, x, init);
        const Eigen::MatrixXd A = J.transpose() * J;
        const Eigen::VectorXd g = J.transpose() * r;
        const double diag_floor = 1e-12 * std::max(A.diagonal().maxCoeff(), 1e-300);
        bool accepted = false;
        while (lambda < 1e16) {
            Eigen::MatrixXd M = A;
            for (int j = 0; j < np; ++j) {
                if (!pr.free[j]) {
                    M.row(j).setZero();
                    M.col(j).setZero();
                    M(j, j) = 1.0;
                } else {
                    M(j, j) += lambda * std::max(A(j, j), diag_floor);
                }
            }
            Eigen::VectorXd rhs = -g;
            for (int j = 0; j < np; ++j) if (!pr.free[j]) rhs[j] = 0.0;
            Eigen::VectorXd step = M.ldlt().solve(rhs);
            Eigen::VectorXd xn = x + step;
            clamp(pr, xn);
            const Eigen::VectorXd rn = residuals(pr, xn, init);
            const double chi2n = rn.squaredNorm();
            if (std::isfinite(chi2n) && chi2n <= chi2) {
                double rel = 0.0;
                for (int j = 0; j < np; ++j) {
                    rel = std::max(rel, std::abs(xn[j] - x[j]) / std::max(std::abs(x[j]), 1e-3 * pr.typical[j]));
                }
                x = xn;
                r = rn;
                const double previous = chi2;
                chi2 = chi2n;
                lambda = std::max(lambda / 3.0, 1e-12);
                accepted = true;
                // Chi2 changes far below one unit carry no statistical weight.
                flat = previous - chi2n <= 1e-6 * previous ? flat + 1 : 0;
                if (rel < options.step_tolerance || flat >= 3) fit.converged = true;
                break;
            }
            lambda *= 4.0;
        }
        if (!accepted) {
            // No downhill step exists at any damping: a (local) minimum.
            stalled = true;
            fit.converged = true;
        }
        if (fit.converged) break;
    }
    (void)stalled;

    int n_free = 0;
    for (bool f : pr.free) n_free += f ? 1 : 0;
    const double dof = std::max(1.0, static_cast<double>(nb) - n_free);
    fit.reduced_chi2 = chi2 / dof;
    fit.energy_offset = x[kOffset];
    fit.params = unpack(x, init);

    // Covariance of the free parameters from the Gauss-Newton normal matrix.
    J = jacobian(pr, x, init);
    Eigen::MatrixXd A = J.transpose() * J;
    for (int j = 0; j < np; ++j) {
        if (!pr.free[j] || A(j, j) <= 0.0) {
            A.row(j).setZero();
            A.col(j).setZero();
            A(j, j) = 1.0;
        }
    }
    const Eigen::MatrixXd cov = A.completeOrthogonalDecomposition().pseudoInverse();

    const double area_sum = x.segment(kFirstArea, pr.orders).sum();
    fit.populations.p.resize(pr.orders);
    fit.area_stderr.resize(pr.orders);
    for (int m = 0; m < pr.orders; ++m) {
        fit.populations.p[m] = x[kFirstArea + m] / area_sum;
        fit.area_stderr[m] = std::sqrt(std::max(0.0, cov(kFirstArea + m, kFirstArea + m))) / area_sum;
    }

    const double a0 = x[kFirstArea], a1 = x[kFirstArea + 1], a2 = x[kFirstArea + 2];
    if (a0 > 0.0 && a1 > 0.0) {
        // u = 2 A2/A1 - A1/A0 (normalization cancels); first-order error propagation.
        Eigen::Vector3d grad(a1 / (a0 * a0), -2.0 * a2 / (a1 * a1) - 1.0 / a0, 2.0 / a1);
        const Eigen::Matrix3d c = cov.block<3, 3>(kFirstArea, kFirstArea);
        fit.dispersion = 2.0 * a2 / a1 - a1 / a0;
        fit.dispersion_stderr = std::sqrt(std::max(0.0, grad.dot(c * grad)));
        const auto raw = fit_coupling_from_sidebands(a0, a1, a2);
        fit.sub_poissonian = raw.sub_poissonian &&
                             -fit.dispersion > options.dispersion_significance * fit.dispersion_stderr;
        fit.dispersion_significant = fit.dispersion > options.dispersion_significance * fit.dispersion_stderr &&
                                     !raw.sub_poissonian && raw.coupling.std_g0 > 0.0;
        if (fit.dispersion_significant) {
            fit.params.coupling = raw.coupling;
        } else {
            fit.params.coupling = {std::sqrt(a1 / a0), 0.0};
        }
        // Uncertainty of mean g0 from r1 = A1/A0.
        Eigen::Vector2d gr(-a1 / (a0 * a0), 1.0 / a0);
        const double var_r1 = gr.dot(cov.block<2, 2>(kFirstArea, kFirstArea) * gr);
        fit.mean_g0_stderr = std::sqrt(std::max(0.0, var_r1)) / (2.0 * std::sqrt(a1 / a0));
    } else {
        fit.params.coupling = {0.0, 0.0};
    }

    std::ostringstream msg;
    msg << (fit.converged ? "converged" : "not converged") << " after " << fit.iterations
        << " iterations, reduced chi2 " << fit.reduced_chi2;
    fit.message = msg.str();
    return fit;
}

}  // namespace

AreaFit fit_sideband_areas(const SpectrumHistogram& h, const std::vector<double>& variances,
                           const SpectrumParams& shape, double energy_offset, int max_order) {
    const std::size_t n = h.counts.size();
    if (h.edges.size() != n + 1 || n < 2) throw std::invalid_argument("histogram needs n + 1 edges and n >= 2 bins");
    if (variances.size() != n) throw std::invalid_argument("one variance per bin required");
    if (max_order < 0) throw std::invalid_argument("max_order must be >= 0");
    const double width = h.edges[1] - h.edges[0];
    const EnergyGrid centers{h.edges[0] + 0.5 * width, width, n};
    const auto k = static_cast<Eigen::Index>(max_order) + 1;
    Eigen::MatrixXd A(static_cast<Eigen::Index>(n), k);
    for (Eigen::Index m = 0; m < k; ++m) {
        std::vector<double> one_hot(static_cast<std::size_t>(k), 0.0);
        one_hot[static_cast<std::size_t>(m)] = 1.0;
        const auto d = spectrum_density(shape, one_hot, centers, energy_offset);
        for (std::size_t i = 0; i < n; ++i) A(static_cast<Eigen::Index>(i), m) = d[i] * width;
    }
    Eigen::VectorXd w(static_cast<Eigen::Index>(n)), y(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        w[static_cast<Eigen::Index>(i)] = 1.0 / std::sqrt(std::max(variances[i], 1.0));
        y[static_cast<Eigen::Index>(i)] = h.counts[i];
    }
    const Eigen::MatrixXd Aw = w.asDiagonal() * A;
    const Eigen::MatrixXd normal = Aw.transpose() * Aw;
    const Eigen::VectorXd rhs = Aw.transpose() * (w.asDiagonal() * y);
    const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(normal);
    const Eigen::VectorXd x = cod.solve(rhs);
    const Eigen::MatrixXd cov = cod.pseudoInverse();
    AreaFit out;
    for (Eigen::Index m = 0; m < k; ++m) {
        out.areas.push_back(x[m]);
        out.variances.push_back(cov(m, m));
    }
    return out;
}

}  // namespace fockherald::model
