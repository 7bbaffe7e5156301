#include "slu/ctc.hpp"

#include <algorithm>
#include <cmath>

namespace slu {

int adjacent_duplicates(const std::vector<int>& labels) {
    int dups = 0;
    for (size_t i = 1; i < labels.size(); ++i)
        if (labels[i] == labels[i - 1]) ++dups;
    return dups;
}

Matrix log_softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (int t = 0; t < logits.rows(); ++t) {
        double m = kNegInf;
        for (int v = 0; v < logits.cols(); ++v) m = std::max(m, logits(t, v));
        double z = 0.0;
        for (int v = 0; v < logits.cols(); ++v) z += std::exp(logits(t, v) - m);
        double logz = m + std::log(z);
        for (int v = 0; v < logits.cols(); ++v) out(t, v) = logits(t, v) - logz;
    }
    return out;
}

namespace {

void check_labels(const Matrix& logp, const std::vector<int>& labels) {
    for (int l : labels)
        if (l <= kBlank || l >= logp.cols())
            throw std::invalid_argument("ctc: label out of vocabulary");
}

}  // namespace

LossResult ctc_loss(const Matrix& logp, const std::vector<int>& labels) {
    const int T = logp.rows();
    const int V = logp.cols();
    const int U = static_cast<int>(labels.size());
    check_labels(logp, labels);
    if (T < U + adjacent_duplicates(labels))
        throw std::invalid_argument("ctc_loss: no valid alignment (input too short)");
    if (T == 0) throw std::invalid_argument("ctc_loss: empty input");

    // Extended label sequence: blank, l1, blank, l2, ..., blank.
    const int S = 2 * U + 1;
    auto ext = [&](int s) { return (s % 2 == 0) ? kBlank : labels[s / 2]; };

    Matrix alpha(T, S, kNegInf);
    Matrix beta(T, S, kNegInf);

    alpha(0, 0) = logp(0, kBlank);
    if (S > 1) alpha(0, 1) = logp(0, ext(1));
    for (int t = 1; t < T; ++t) {
        for (int s = 0; s < S; ++s) {
            double a = alpha(t - 1, s);
            if (s >= 1) a = log_sum_exp(a, alpha(t - 1, s - 1));
            // skip transition only between distinct non-blank labels
            if (s >= 2 && ext(s) != kBlank && ext(s) != ext(s - 2))
                a = log_sum_exp(a, alpha(t - 1, s - 2));
            alpha(t, s) = a + logp(t, ext(s));
        }
    }

    double log_lik = alpha(T - 1, S - 1);
    if (S > 1) log_lik = log_sum_exp(log_lik, alpha(T - 1, S - 2));
    if (log_lik == kNegInf)
        throw std::invalid_argument("ctc_loss: no valid alignment");

    beta(T - 1, S - 1) = 0.0;
    if (S > 1) beta(T - 1, S - 2) = 0.0;
    for (int t = T - 2; t >= 0; --t) {
        for (int s = 0; s < S; ++s) {
            double b = beta(t + 1, s) + logp(t + 1, ext(s));
            if (s + 1 < S) b = log_sum_exp(b, beta(t + 1, s + 1) + logp(t + 1, ext(s + 1)));
            if (s + 2 < S && ext(s + 2) != kBlank && ext(s + 2) != ext(s))
                b = log_sum_exp(b, beta(t + 1, s + 2) + logp(t + 1, ext(s + 2)));
            beta(t, s) = b;
        }
    }

    // Occupancy gamma[t][v] = P(symbol v emitted at t | Y); gradient w.r.t.
    // logits of a row-softmax is softmax - gamma.
    LossResult res;
    res.loss = -log_lik;
    res.grad = Matrix(T, V);
    for (int t = 0; t < T; ++t) {
        std::vector<double> occ(V, kNegInf);
        for (int s = 0; s < S; ++s) {
            int v = ext(s);
            occ[v] = log_sum_exp(occ[v], alpha(t, s) + beta(t, s));
        }
        for (int v = 0; v < V; ++v) {
            double gamma = occ[v] == kNegInf ? 0.0 : std::exp(occ[v] - log_lik);
            res.grad(t, v) = std::exp(logp(t, v)) - gamma;
        }
    }
    return res;
}

double ctc_brute_force(const Matrix& logp, const std::vector<int>& labels) {
    const int T = logp.rows();
    const int V = logp.cols();
    check_labels(logp, labels);
    double n_paths = std::pow(static_cast<double>(V), T);
    if (n_paths > 1e6) throw std::invalid_argument("ctc_brute_force: instance too large");

    std::vector<int> path(T, 0);
    double total = kNegInf;
    while (true) {
        // collapse: merge repeats, then drop blanks
        std::vector<int> collapsed;
        int prev = -1;
        for (int t = 0; t < T; ++t) {
            if (path[t] != prev && path[t] != kBlank) collapsed.push_back(path[t]);
            prev = path[t];
        }
        if (collapsed == labels) {
            double lp = 0.0;
            for (int t = 0; t < T; ++t) lp += logp(t, path[t]);
            total = log_sum_exp(total, lp);
        }
        // next path in lexicographic order
        int pos = T - 1;
        while (pos >= 0 && path[pos] == V - 1) path[pos--] = 0;
        if (pos < 0) break;
        ++path[pos];
    }
    if (total == kNegInf)
        throw std::invalid_argument("ctc_brute_force: no valid alignment");
    return -total;
}

double ctc_grad_check(const Matrix& logp, const std::vector<int>& labels, double h) {
    LossResult analytic = ctc_loss(logp, labels);
    double max_rel = 0.0;
    for (int t = 0; t < logp.rows(); ++t) {
        for (int v = 0; v < logp.cols(); ++v) {
            auto eval = [&](double delta) {
                Matrix pert = logp;
                pert(t, v) += delta;
                return ctc_loss(log_softmax_rows(pert), labels).loss;
            };
            double fd = (eval(h) - eval(-h)) / (2.0 * h);
            double g = analytic.grad(t, v);
            double denom = std::max({std::fabs(fd), std::fabs(g), 1e-8});
            max_rel = std::max(max_rel, std::fabs(fd - g) / denom);
        }
    }
    return max_rel;
}

}  // namespace slu
