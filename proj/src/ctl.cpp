#include "slu/ctl.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace slu {

namespace {

void check_probs(const Matrix& y) {
    for (double v : y.data())
        if (!(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument("ctl: event probabilities must lie in [0,1]");
}

// Boundary-label matrix z (T x alphabet) for the target's mode.
Matrix boundary_matrix(const BoundaryProbs& b, CtlMode mode) {
    const int T = b.on.rows();
    const int E = b.on.cols();
    if (mode == CtlMode::OnsetOnly) return b.on;
    Matrix z(T, 2 * E);
    for (int t = 0; t < T; ++t)
        for (int e = 0; e < E; ++e) {
            z(t, 2 * e) = b.on(t, e);
            z(t, 2 * e + 1) = b.off(t, e);
        }
    return z;
}

bool slice_has_duplicates(const std::vector<int>& labels, int pos, int len) {
    for (int i = 0; i < len; ++i)
        for (int j = i + 1; j < len; ++j)
            if (labels[pos + i] == labels[pos + j]) return true;
    return false;
}

// p_t(slice) and, if grad != nullptr, d p / d z(l) for every alphabet label.
double slice_prob(const double* z, int alphabet, const std::vector<int>& labels,
                  int pos, int len, std::vector<double>* grad) {
    std::vector<char> in_set(alphabet, 0);
    for (int i = 0; i < len; ++i) in_set[labels[pos + i]] = 1;
    double p = 1.0;
    for (int l = 0; l < alphabet; ++l) p *= in_set[l] ? z[l] : 1.0 - z[l];
    if (grad) {
        grad->assign(alphabet, 0.0);
        for (int l = 0; l < alphabet; ++l) {
            double excl = 1.0;
            for (int m = 0; m < alphabet; ++m)
                if (m != l) excl *= in_set[m] ? z[m] : 1.0 - z[m];
            (*grad)[l] = in_set[l] ? excl : -excl;
        }
    }
    return p;
}

// Chains a gradient on z back onto y through the rectified delta; subgradient
// 0 at ties (strict inequality defines the active branch).
void chain_rectified_delta(const Matrix& y, const Matrix& gz, CtlMode mode, Matrix* gy) {
    const int T = y.rows();
    const int E = y.cols();
    for (int t = 0; t < T; ++t) {
        for (int e = 0; e < E; ++e) {
            double prev = t > 0 ? y(t - 1, e) : 0.0;
            double g_on = mode == CtlMode::OnsetOnly ? gz(t, e) : gz(t, 2 * e);
            if (y(t, e) > prev) {
                (*gy)(t, e) += g_on;
                if (t > 0) (*gy)(t - 1, e) -= g_on;
            }
            if (mode == CtlMode::OnsetOffset && prev > y(t, e)) {
                double g_off = gz(t, 2 * e + 1);
                (*gy)(t - 1, e) += g_off;  // t == 0 never active: prev is 0, y >= 0
                (*gy)(t, e) -= g_off;
            }
        }
    }
}

}  // namespace

BoundaryProbs rectified_delta(const Matrix& y) {
    check_probs(y);
    const int T = y.rows();
    const int E = y.cols();
    BoundaryProbs b{Matrix(T, E), Matrix(T, E)};
    for (int t = 0; t < T; ++t)
        for (int e = 0; e < E; ++e) {
            double prev = t > 0 ? y(t - 1, e) : 0.0;
            b.on(t, e) = std::max(0.0, y(t, e) - prev);
            b.off(t, e) = std::max(0.0, prev - y(t, e));
        }
    return b;
}

double emission_prob(std::span<const double> z, const std::vector<int>& emitted) {
    std::vector<char> in_set(z.size(), 0);
    for (int l : emitted) {
        if (l < 0 || l >= static_cast<int>(z.size()))
            throw std::invalid_argument("emission_prob: label out of alphabet");
        in_set[l] = 1;
    }
    double p = 1.0;
    for (size_t l = 0; l < z.size(); ++l) p *= in_set[l] ? z[l] : 1.0 - z[l];
    return p;
}

LossResult ctl_loss(const Matrix& y, const CtlTarget& target) {
    check_probs(y);
    const int T = y.rows();
    const int k = static_cast<int>(target.labels.size());
    const int A = target.alphabet_size;
    if (T < 1) throw std::invalid_argument("ctl_loss: empty input");
    for (int l : target.labels)
        if (l < 0 || l >= A) throw std::invalid_argument("ctl_loss: label out of alphabet");

    Matrix z = boundary_matrix(rectified_delta(y), target.mode);

    // Scaled forward/backward rows; alpha[t] covers frames [0, t), beta[t]
    // covers frames [t, T). log_scale_* carries the factored-out magnitude.
    std::vector<std::vector<double>> alpha(T + 1, std::vector<double>(k + 1, 0.0));
    std::vector<std::vector<double>> beta(T + 1, std::vector<double>(k + 1, 0.0));
    std::vector<double> log_scale_a(T + 1, 0.0), log_scale_b(T + 1, 0.0);
    alpha[0][0] = 1.0;
    beta[T][k] = 1.0;

    for (int t = 0; t < T; ++t) {
        for (int i = 0; i <= k; ++i) {
            double acc = 0.0;
            for (int j = 0; j <= i; ++j) {
                int pos = i - j;
                if (alpha[t][pos] == 0.0) continue;
                if (slice_has_duplicates(target.labels, pos, j)) continue;
                acc += alpha[t][pos] * slice_prob(z.row(t), A, target.labels, pos, j, nullptr);
            }
            alpha[t + 1][i] = acc;
        }
        double s = *std::max_element(alpha[t + 1].begin(), alpha[t + 1].end());
        log_scale_a[t + 1] = log_scale_a[t];
        if (s > 0.0) {
            for (double& v : alpha[t + 1]) v /= s;
            log_scale_a[t + 1] += std::log(s);
        }
    }
    for (int t = T - 1; t >= 0; --t) {
        for (int i = 0; i <= k; ++i) {
            double acc = 0.0;
            for (int j = 0; i + j <= k; ++j) {
                if (beta[t + 1][i + j] == 0.0) continue;
                if (slice_has_duplicates(target.labels, i, j)) continue;
                acc += beta[t + 1][i + j] * slice_prob(z.row(t), A, target.labels, i, j, nullptr);
            }
            beta[t][i] = acc;
        }
        double s = *std::max_element(beta[t].begin(), beta[t].end());
        log_scale_b[t] = log_scale_b[t + 1];
        if (s > 0.0) {
            for (double& v : beta[t]) v /= s;
            log_scale_b[t] += std::log(s);
        }
    }

    if (alpha[T][k] == 0.0) throw std::runtime_error("ctl_loss: unreachable target");
    const double log_p = std::log(alpha[T][k]) + log_scale_a[T];

    // dL/dp_t(slice pos..pos+j) = -alpha[t][pos] * beta[t+1][pos+j] / P
    Matrix gz(T, A);
    std::vector<double> pgrad;
    for (int t = 0; t < T; ++t) {
        for (int pos = 0; pos <= k; ++pos) {
            if (alpha[t][pos] == 0.0) continue;
            for (int j = 0; pos + j <= k; ++j) {
                if (beta[t + 1][pos + j] == 0.0) continue;
                if (slice_has_duplicates(target.labels, pos, j)) continue;
                double coeff = -std::exp(std::log(alpha[t][pos]) + log_scale_a[t] +
                                         std::log(beta[t + 1][pos + j]) + log_scale_b[t + 1] -
                                         log_p);
                slice_prob(z.row(t), A, target.labels, pos, j, &pgrad);
                for (int l = 0; l < A; ++l) gz(t, l) += coeff * pgrad[l];
            }
        }
    }

    LossResult res;
    res.loss = -log_p;
    res.grad = Matrix(T, y.cols());
    chain_rectified_delta(y, gz, target.mode, &res.grad);
    return res;
}

double ctl_brute_force(const Matrix& y, const CtlTarget& target) {
    check_probs(y);
    const int T = y.rows();
    const int k = static_cast<int>(target.labels.size());
    const int A = target.alphabet_size;
    if (std::pow(std::pow(2.0, A), T) > 1e6)
        throw std::invalid_argument("ctl_brute_force: instance too large");

    Matrix z = boundary_matrix(rectified_delta(y), target.mode);
    const uint32_t n_masks = 1u << A;
    std::vector<uint32_t> masks(T, 0);
    double total = 0.0;
    bool any = false;
    while (true) {
        // validate: per-frame subsets must concatenate to the target in order
        int pos = 0;
        bool ok = true;
        for (int t = 0; t < T && ok; ++t) {
            int m = std::popcount(masks[t]);
            if (pos + m > k || slice_has_duplicates(target.labels, pos, m)) {
                ok = false;
                break;
            }
            uint32_t slice_mask = 0;
            for (int i = 0; i < m; ++i) slice_mask |= 1u << target.labels[pos + i];
            if (slice_mask != masks[t]) ok = false;
            pos += m;
        }
        if (ok && pos == k) {
            any = true;
            double p = 1.0;
            for (int t = 0; t < T; ++t) {
                std::vector<int> emitted;
                for (int l = 0; l < A; ++l)
                    if (masks[t] & (1u << l)) emitted.push_back(l);
                p *= emission_prob(std::span<const double>(z.row(t), A), emitted);
            }
            total += p;
        }
        int t = T - 1;
        while (t >= 0 && masks[t] == n_masks - 1) masks[t--] = 0;
        if (t < 0) break;
        ++masks[t];
    }
    if (!any || total == 0.0) throw std::runtime_error("ctl_brute_force: unreachable target");
    return -std::log(total);
}

std::vector<double> mil_pool(const Matrix& y) {
    check_probs(y);
    if (y.rows() < 1) throw std::invalid_argument("mil_pool: empty input");
    std::vector<double> pooled(y.cols(), 0.0);
    for (int e = 0; e < y.cols(); ++e) {
        double s1 = 0.0, s2 = 0.0;
        for (int t = 0; t < y.rows(); ++t) {
            s1 += y(t, e);
            s2 += y(t, e) * y(t, e);
        }
        pooled[e] = s1 > 0.0 ? s2 / s1 : 0.0;
    }
    return pooled;
}

std::vector<int> bag_from_target(const CtlTarget& target, int n_events) {
    std::vector<int> bag(n_events, 0);
    for (int l : target.labels) {
        int e = target.mode == CtlMode::OnsetOnly ? l : l / 2;
        if (e >= 0 && e < n_events) bag[e] = 1;
    }
    return bag;
}

LossResult ctl_mil_loss(const Matrix& y, const CtlTarget& target,
                        const std::vector<int>& bag_labels, double w_ctl, double w_mil) {
    if (w_ctl < 0.0 || w_mil < 0.0 || std::fabs(w_ctl + w_mil - 1.0) > 1e-9)
        throw std::invalid_argument("ctl_mil_loss: weights must be nonnegative and sum to 1");
    if (static_cast<int>(bag_labels.size()) != y.cols())
        throw std::invalid_argument("ctl_mil_loss: bag label count must match events");

    LossResult res;
    res.grad = Matrix(y.rows(), y.cols());
    if (w_ctl > 0.0) {
        LossResult ctl = ctl_loss(y, target);
        res.loss += w_ctl * ctl.loss;
        for (size_t i = 0; i < res.grad.size(); ++i)
            res.grad.data()[i] += w_ctl * ctl.grad.data()[i];
    }
    if (w_mil > 0.0) {
        constexpr double kClamp = 1e-12;
        std::vector<double> pooled = mil_pool(y);
        const int E = y.cols();
        double bce = 0.0;
        for (int e = 0; e < E; ++e) {
            double p = std::clamp(pooled[e], kClamp, 1.0 - kClamp);
            bce += bag_labels[e] ? -std::log(p) : -std::log(1.0 - p);
            double s1 = 0.0, s2 = 0.0;
            for (int t = 0; t < y.rows(); ++t) {
                s1 += y(t, e);
                s2 += y(t, e) * y(t, e);
            }
            if (s1 <= 0.0) continue;  // pooled value pinned at 0, subgradient 0
            double dbce = (p - bag_labels[e]) / (p * (1.0 - p));
            for (int t = 0; t < y.rows(); ++t) {
                double dpool = (2.0 * y(t, e) * s1 - s2) / (s1 * s1);
                res.grad(t, e) += w_mil * dbce * dpool / E;
            }
        }
        res.loss += w_mil * bce / E;
    }
    return res;
}

double ctl_grad_check(const Matrix& y, const CtlTarget& target, double h) {
    LossResult analytic = ctl_loss(y, target);
    double max_rel = 0.0;
    for (int t = 0; t < y.rows(); ++t) {
        for (int e = 0; e < y.cols(); ++e) {
            auto eval = [&](double delta) {
                Matrix pert = y;
                pert(t, e) += delta;  // callers keep y in [h, 1-h]
                return ctl_loss(pert, target).loss;
            };
            double fd = (eval(h) - eval(-h)) / (2.0 * h);
            double g = analytic.grad(t, e);
            double denom = std::max({std::fabs(fd), std::fabs(g), 1e-6});
            max_rel = std::max(max_rel, std::fabs(fd - g) / denom);
        }
    }
    return max_rel;
}

}  // namespace slu
