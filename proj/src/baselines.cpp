#include "hybridsel/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <stdexcept>

#include "hybridsel/error.hpp"
#include "hybridsel/parallel.hpp"
#include "hybridsel/pipeline.hpp"

namespace hybridsel {

std::string method_name(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::Dcam: return "dcam";
        case BaselineMethod::Apl: return "apl";
        case BaselineMethod::Proxy: return "proxy";
        case BaselineMethod::Qada: return "qada";
        case BaselineMethod::Razor: return "razor";
        case BaselineMethod::Fisher: return "fisher";
    }
    return "unknown";
}

BaselineMethod method_from_name(const std::string& name) {
    for (auto m : {BaselineMethod::Dcam, BaselineMethod::Apl, BaselineMethod::Proxy, BaselineMethod::Qada,
                   BaselineMethod::Razor, BaselineMethod::Fisher}) {
        if (method_name(m) == name) return m;
    }
    throw ConfigError("unknown baseline method '" + name + "'");
}

Direction method_direction(BaselineMethod m) {
    // DCAM, APL, QAdA and Fisher score locality (high = local, converted first);
    // Proxy and Razor score globality.
    return (m == BaselineMethod::Proxy || m == BaselineMethod::Razor) ? Direction::ConvertLowestFirst
                                                                      : Direction::ConvertHighestFirst;
}

namespace {

// Sum of weight(t, t - d) over rows, by lag d.
template <class Weight>
std::vector<double> lag_histogram(const std::vector<const Matrix*>& mats, Weight weight) {
    std::size_t maxT = 0;
    for (const Matrix* m : mats) maxT = std::max<std::size_t>(maxT, m->rows());
    std::vector<double> hist(maxT, 0.0);
    for (std::size_t e = 0; e < mats.size(); ++e) {
        const Matrix& a = *mats[e];
        for (Eigen::Index t = 0; t < a.rows(); ++t)
            for (Eigen::Index j = 0; j <= t; ++j) hist[t - j] += weight(e, t, j);
    }
    return hist;
}

double in_window_share(const std::vector<double>& hist, int window, const char* what) {
    const double total = std::accumulate(hist.begin(), hist.end(), 0.0);
    if (!(total > 0.0)) throw DegenerateError(std::string(what) + ": all lag mass is zero");
    double inside = 0.0;
    for (std::size_t d = 0; d < hist.size() && d < static_cast<std::size_t>(window); ++d) inside += hist[d];
    return inside / total;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

double dcam_score(const std::vector<const Matrix*>& attention, int window) {
    const auto hist = lag_histogram(attention, [&](std::size_t e, Eigen::Index t, Eigen::Index j) {
        return (*attention[e])(t, j);
    });
    return in_window_share(hist, window, "dcam");
}

double fisher_score(const std::vector<const Matrix*>& attention, const std::vector<const Matrix*>& grads, int window) {
    if (attention.size() != grads.size()) throw std::invalid_argument("fisher: attention and gradient counts differ");
    const auto hist = lag_histogram(attention, [&](std::size_t e, Eigen::Index t, Eigen::Index j) {
        const double s = (*grads[e])(t, j) * (*attention[e])(t, j);
        return s * s;
    });
    return in_window_share(hist, window, "fisher (no saliency captured)");
}

int peak_lag(const Matrix& attention, int t_star) {
    Eigen::Index arg = 0;
    attention.row(t_star).head(t_star + 1).maxCoeff(&arg);  // first maximum
    return t_star - static_cast<int>(arg);
}

double apl_score(const std::vector<int>& lags, int window) {
    if (lags.empty()) throw std::invalid_argument("apl: no examples");
    std::vector<int> v = lags;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    const double med = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    return 1.0 - std::min(1.0, med / window);
}

double mean_entropy(const std::vector<const Matrix*>& attention) {
    double total = 0.0;
    std::size_t rows = 0;
    for (const Matrix* m : attention) {
        for (Eigen::Index t = 0; t < m->rows(); ++t) {
            double h = 0.0;
            for (Eigen::Index j = 0; j <= t; ++j) {
                const double p = (*m)(t, j);
                if (p > 0.0) h -= p * std::log(p);
            }
            total += h;
            ++rows;
        }
    }
    return rows ? total / rows : 0.0;
}

double proxy_score(const std::vector<const Matrix*>& head, const std::vector<const Matrix*>& proxy, int block,
                   double mass) {
    if (block < 1) throw ConfigError("proxy: block size must be >= 1");
    if (!(mass > 0.0 && mass <= 1.0)) throw ConfigError("proxy: mass fraction must lie in (0, 1]");
    if (proxy.empty() || head.size() != proxy.size()) throw std::invalid_argument("proxy: empty proxy set");
    double total = 0.0;
    std::size_t rows = 0;
    std::vector<double> own, pooled;
    std::vector<int> order;
    for (std::size_t e = 0; e < head.size(); ++e) {
        const Matrix& a = *head[e];
        const Matrix& p = *proxy[e];
        for (Eigen::Index t = 0; t < a.rows(); ++t) {
            const int nb = static_cast<int>(t / block) + 1;
            own.assign(nb, 0.0);
            pooled.assign(nb, 0.0);
            for (Eigen::Index j = 0; j <= t; ++j) {
                own[j / block] += a(t, j);
                pooled[j / block] += p(t, j);
            }
            order.resize(nb);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return pooled[x] > pooled[y]; });
            const double goal = mass * std::accumulate(own.begin(), own.end(), 0.0) - 1e-12;
            double acc = 0.0;
            int m = 0;
            while (m < nb && acc < goal) acc += own[order[m++]];
            total += static_cast<double>(std::max(m, 1)) / nb;
            ++rows;
        }
    }
    return total / rows;
}

double exact_local_fraction(const Eigen::Ref<const Eigen::RowVectorXd>& q, const Matrix& keys, int t, int window,
                            double tau) {
    const Eigen::VectorXd logits = tau * (keys.topRows(t + 1) * q.transpose());
    const double m = logits.maxCoeff();
    const Eigen::ArrayXd e = (logits.array() - m).exp();
    const int lo = std::max(0, t - window + 1);
    return e.segment(lo, t - lo + 1).sum() / e.sum();
}

double qada_row(const Eigen::Ref<const Eigen::RowVectorXd>& q, const Matrix& keys, int t, int window, int buffer,
                double tau) {
    if (t < window) throw std::invalid_argument("qada: row has no keys outside the window");
    const int far_end = t - window;  // inclusive
    const int far_count = far_end + 1;
    const int b_lo = std::max(0, far_end - buffer + 1);
    const auto buf = keys.middleRows(b_lo, far_end - b_lo + 1);
    const Eigen::RowVectorXd mu = buf.colwise().mean();
    const Matrix centered = buf.rowwise() - mu;
    const Eigen::VectorXd cq = centered * q.transpose();
    const double quad = cq.squaredNorm() / static_cast<double>(buf.rows());  // q' Sigma q, population
    const Eigen::VectorXd local = tau * (keys.middleRows(far_end + 1, window) * q.transpose());
    const double m = local.maxCoeff();
    const double log_local = m + std::log((local.array() - m).exp().sum());
    const double log_global = std::log(static_cast<double>(far_count)) + tau * q.dot(mu) + 0.5 * tau * tau * quad;
    return 1.0 / (1.0 + std::exp(log_global - log_local));
}

double qada_score(const std::vector<const Matrix*>& queries, const std::vector<const Matrix*>& keys, int window,
                  int buffer, double tau) {
    double total = 0.0;
    std::size_t rows = 0;
    for (std::size_t e = 0; e < queries.size(); ++e) {
        for (Eigen::Index t = window; t < queries[e]->rows(); ++t) {
            total += qada_row(queries[e]->row(t), *keys[e], static_cast<int>(t), window, buffer, tau);
            ++rows;
        }
    }
    if (rows == 0) {
        throw DegenerateError("qada: no calibration row lies beyond the window; use longer calibration sequences");
    }
    return total / rows;
}

RazorProbe razor_probe(int block, int vocab, std::uint64_t seed) {
    if (block < 1 || vocab < 1) throw ConfigError("razor: block and vocabulary must be positive");
    std::mt19937_64 rng(seed);
    RazorProbe p;
    p.block = block;
    std::vector<int> unit(block);
    for (int& t : unit) t = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
    for (int r = 0; r < 4; ++r) p.tokens.insert(p.tokens.end(), unit.begin(), unit.end());
    return p;
}

std::pair<double, double> razor_echo_induction(const Matrix& a, int K, bool standard_induction) {
    const int n = 4 * K;
    if (a.rows() < n) throw std::invalid_argument("razor: attention shorter than the probe");
    double echo = 0.0, ind = 0.0;
    int ind_rows = 0;
    for (int m = K; m < n; ++m) {
        echo += a(m, m - K);
        const int j = standard_induction ? m - K + 1 : m - 1 - K;
        if (j >= 0) {
            ind += a(m, j);
            ++ind_rows;
        }
    }
    return {echo / (n - K), ind_rows ? ind / ind_rows : 0.0};
}

std::vector<double> razor_scores(const std::vector<double>& echo, const std::vector<double>& induction) {
    auto z = [](const std::vector<double>& v) {
        const double mu = mean(v);
        double var = 0.0;
        for (double x : v) var += (x - mu) * (x - mu);
        const double sd = std::sqrt(var / v.size());
        std::vector<double> out(v.size(), 0.0);
        if (sd > 0.0)
            for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mu) / sd;
        return out;
    };
    const auto ze = z(echo), zi = z(induction);
    std::vector<double> s(echo.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::max(ze[i], zi[i]);
    return s;
}

std::vector<ForwardTrace> capture_traces(const ToyModel& model, const CalibrationSet& set, CaptureFlags flags) {
    const HeadMask full = HeadMask::all_full(model.spec().mask_shape());
    std::vector<ForwardTrace> out(set.examples.size());
    parallel_for(set.examples.size(), [&](std::size_t i) {
        const auto& ex = set.examples[i];
        const auto tokens = std::span<const int>(ex.tokens).first(ex.scored_length());
        const int window = model.spec().max_seq_len;
        if (flags.attention_grads) {
            out[i] = forward_with_grads(model, full, tokens, window, {ex.answer_positions, ex.answer_tokens}, flags);
        } else {
            out[i] = forward(model, full, tokens, window, flags);
        }
    });
    return out;
}

HeadScoreTable run_baseline(BaselineMethod method, const ToyModel& model, const CalibrationSet& set,
                            const BaselineConfig& config) {
    const auto& spec = model.spec();
    const int L = spec.num_layers, H = spec.heads_per_layer, G = spec.kv_groups;
    if (config.window < 1) throw ConfigError("baseline window must be >= 1");
    HeadScoreTable table;
    table.method = method_name(method);
    table.direction = method_direction(method);
    table.layers = L;
    table.heads = H;
    table.scores.assign(static_cast<std::size_t>(L) * H, 0.0);

    if (method == BaselineMethod::Razor) {
        const int K = config.razor_block > 0 ? config.razor_block : set.spec.seq_len / 4;
        if (4 * K > spec.max_seq_len) {
            throw ConfigError("razor: probe length 4K = " + std::to_string(4 * K) + " exceeds max_seq_len");
        }
        const RazorProbe probe = razor_probe(K, spec.vocab_size, config.seed);
        const ForwardTrace tr = forward(model, HeadMask::all_full(spec.mask_shape()), probe.tokens,
                                        spec.max_seq_len, {.attention = true});
        std::vector<double> echo(L * H), ind(L * H);
        for (int i = 0; i < L * H; ++i) {
            std::tie(echo[i], ind[i]) = razor_echo_induction(tr.attention[i], K, config.razor_standard_induction);
        }
        table.scores = razor_scores(echo, ind);
        return table;
    }

    CaptureFlags flags;
    flags.attention = method != BaselineMethod::Qada;
    flags.queries_keys = method == BaselineMethod::Qada;
    flags.attention_grads = method == BaselineMethod::Fisher;
    const auto traces = capture_traces(model, set, flags);

    auto attn_of = [&](int l, int h) {
        std::vector<const Matrix*> v;
        for (const auto& t : traces) v.push_back(&t.attention[l * H + h]);
        return v;
    };

    for (int l = 0; l < L; ++l) {
        int proxy = config.proxy_head;
        if (method == BaselineMethod::Proxy && proxy < 0) {
            double best = -1.0;
            for (int h = 0; h < H; ++h) {
                const double e = mean_entropy(attn_of(l, h));
                if (e > best) best = e, proxy = h;
            }
        }
        if (method == BaselineMethod::Proxy && proxy >= H) throw ConfigError("proxy head index out of range");
        for (int h = 0; h < H; ++h) {
            double s = 0.0;
            switch (method) {
                case BaselineMethod::Dcam: s = dcam_score(attn_of(l, h), config.window); break;
                case BaselineMethod::Apl: {
                    std::vector<int> lags;
                    for (std::size_t e = 0; e < traces.size(); ++e) {
                        lags.push_back(peak_lag(traces[e].attention[l * H + h], set.examples[e].answer_positions.back()));
                    }
                    s = apl_score(lags, config.window);
                    break;
                }
                case BaselineMethod::Proxy:
                    s = proxy_score(attn_of(l, h), attn_of(l, proxy), config.proxy_block, config.proxy_mass);
                    break;
                case BaselineMethod::Qada: {
                    std::vector<const Matrix*> qs, ks;
                    const int g = h / (H / G);
                    for (const auto& t : traces) {
                        qs.push_back(&t.queries[l * H + h]);
                        ks.push_back(&t.keys[l * G + g]);
                    }
                    s = qada_score(qs, ks, config.window, config.buffer(), spec.tau());
                    break;
                }
                case BaselineMethod::Fisher: {
                    std::vector<const Matrix*> gs;
                    for (const auto& t : traces) gs.push_back(&t.attention_grads[l * H + h]);
                    s = fisher_score(attn_of(l, h), gs, config.window);
                    break;
                }
                case BaselineMethod::Razor: break;
            }
            table.scores[l * H + h] = s;
        }
    }
    return table;
}

std::vector<double> pool_groups(const HeadScoreTable& table, const MaskShape& shape) {
    if (table.layers != shape.layers || table.heads != shape.heads) {
        throw std::invalid_argument("score table does not match the mask shape");
    }
    const int per = shape.heads_per_group();
    std::vector<double> out(shape.num_groups(), 0.0);
    for (int l = 0; l < shape.layers; ++l)
        for (int h = 0; h < shape.heads; ++h) out[l * shape.groups + h / per] += table.at(l, h) / per;
    return out;
}

std::vector<int> conversion_order(const HeadScoreTable& table, const MaskShape& shape) {
    const auto pooled = pool_groups(table, shape);
    for (double v : pooled)
        if (!std::isfinite(v)) throw DegenerateError("score table has non-finite entries");
    std::vector<int> order(pooled.size());
    std::iota(order.begin(), order.end(), 0);
    const bool high_first = table.direction == Direction::ConvertHighestFirst;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return high_first ? pooled[a] > pooled[b] : pooled[a] < pooled[b]; });
    return order;
}

HeadMask select_mask(const HeadScoreTable& table, double rho, const MaskShape& shape) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
    const auto order = conversion_order(table, shape);
    const int k = std::min(static_cast<int>(order.size()), ceil_count(rho * shape.num_groups()));
    return HeadMask::from_swa_groups(shape, std::vector<int>(order.begin(), order.begin() + k));
}

void write_score_csv(const HeadScoreTable& table, const MaskShape& shape, std::ostream& out) {
    const auto pooled = pool_groups(table, shape);
    const auto order = conversion_order(table, shape);
    std::vector<int> rank(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = static_cast<int>(i);
    out << "layer,head,group,raw_score,pooled_score,rank\n" << std::setprecision(17);
    const int per = shape.heads_per_group();
    for (int l = 0; l < shape.layers; ++l) {
        for (int h = 0; h < shape.heads; ++h) {
            const int g = l * shape.groups + h / per;
            out << l << ',' << h << ',' << h / per << ',' << table.at(l, h) << ',' << pooled[g] << ',' << rank[g]
                << '\n';
        }
    }
}

}  // namespace hybridsel
