#pragma once

// Minimal stacked-LSTM engine: forward inference, exact backprop through
// time, Adam training and a flat f32 weight-file format. Training runs in
// f64 so the finite-difference gradient check is meaningful; weights are
// stored in f32.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "wearmocap/errors.hpp"

namespace wearmocap::lstm {

struct LstmConfig {
    int num_layers = 3;
    int hidden_size = 128;
    int input_size = 0;
    int output_size = 0;

    bool operator==(const LstmConfig&) const = default;

    void validate() const {
        if (num_layers < 1 || hidden_size < 1 || input_size < 1 || output_size < 1)
            throw DimensionError("lstm config dimensions must be positive");
    }
};

// Gate rows are stacked input, forget, cell-candidate, output.
struct LayerParams {
    std::vector<double> wx;  // 4H x layer_input
    std::vector<double> wh;  // 4H x H
    std::vector<double> b;   // 4H
};

struct LstmParams {
    LstmConfig cfg;
    std::vector<LayerParams> layers;
    std::vector<double> head_w;  // out x H
    std::vector<double> head_b;  // out

    int layer_input(int l) const { return l == 0 ? cfg.input_size : cfg.hidden_size; }

    static LstmParams zeros(const LstmConfig& cfg) {
        cfg.validate();
        LstmParams p;
        p.cfg = cfg;
        p.layers.resize(static_cast<std::size_t>(cfg.num_layers));
        const int h = cfg.hidden_size;
        for (int l = 0; l < cfg.num_layers; ++l) {
            auto& lp = p.layers[static_cast<std::size_t>(l)];
            lp.wx.assign(static_cast<std::size_t>(4 * h) * p.layer_input(l), 0.0);
            lp.wh.assign(static_cast<std::size_t>(4 * h) * h, 0.0);
            lp.b.assign(static_cast<std::size_t>(4 * h), 0.0);
        }
        p.head_w.assign(static_cast<std::size_t>(cfg.output_size) * h, 0.0);
        p.head_b.assign(static_cast<std::size_t>(cfg.output_size), 0.0);
        return p;
    }

    // Uniform(-1/sqrt(H), 1/sqrt(H)) init with the forget-gate bias at 1.
    static LstmParams random_init(const LstmConfig& cfg, std::uint64_t seed) {
        LstmParams p = zeros(cfg);
        std::mt19937_64 rng(seed);
        const double k = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_size));
        std::uniform_real_distribution<double> u(-k, k);
        for (auto& lp : p.layers) {
            for (auto& w : lp.wx) w = u(rng);
            for (auto& w : lp.wh) w = u(rng);
            for (int r = cfg.hidden_size; r < 2 * cfg.hidden_size; ++r)
                lp.b[static_cast<std::size_t>(r)] = 1.0;
        }
        for (auto& w : p.head_w) w = u(rng);
        return p;
    }

    struct TensorRef {
        std::string name;
        std::vector<double>* data;
    };

    std::vector<TensorRef> tensors() {
        std::vector<TensorRef> out;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            out.push_back({"layer" + std::to_string(l) + ".wx", &layers[l].wx});
            out.push_back({"layer" + std::to_string(l) + ".wh", &layers[l].wh});
            out.push_back({"layer" + std::to_string(l) + ".b", &layers[l].b});
        }
        out.push_back({"head.w", &head_w});
        out.push_back({"head.b", &head_b});
        return out;
    }

    std::size_t param_count() const {
        std::size_t n = head_w.size() + head_b.size();
        for (const auto& l : layers) n += l.wx.size() + l.wh.size() + l.b.size();
        return n;
    }
};

namespace detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Lane-split dot product: partial sums vectorize under strict FP semantics
// where a single running sum would not.
template <typename T, int Lanes>
T dot_lanes(const T* a, const T* b, int n) {
    T acc[Lanes] = {};
    int k = 0;
    for (; k + Lanes <= n; k += Lanes)
        for (int j = 0; j < Lanes; ++j) acc[j] += a[k + j] * b[k + j];
    T s = T(0);
    for (int j = 0; j < Lanes; ++j) s += acc[j];
    for (; k < n; ++k) s += a[k] * b[k];
    return s;
}

inline double dot(const double* a, const double* b, int n) { return dot_lanes<double, 8>(a, b, n); }
inline float dot(const float* a, const float* b, int n) { return dot_lanes<float, 16>(a, b, n); }

// One cell step: z = wx*x + wh*h_prev + b, gate order i,f,g,o.
// gates receives post-activation values.
inline void cell_step(int in_sz, int h_sz, const double* wx, const double* wh, const double* b,
                      const double* x, const double* h_prev, const double* c_prev, double* gates,
                      double* c_out, double* h_out, double* tc_out) {
    const int rows = 4 * h_sz;
    for (int r = 0; r < rows; ++r) {
        const double* wxr = wx + static_cast<std::size_t>(r) * in_sz;
        const double* whr = wh + static_cast<std::size_t>(r) * h_sz;
        gates[r] = b[r] + dot(wxr, x, in_sz) + dot(whr, h_prev, h_sz);
    }
    double* gi = gates;
    double* gf = gates + h_sz;
    double* gg = gates + 2 * h_sz;
    double* go = gates + 3 * h_sz;
    for (int j = 0; j < h_sz; ++j) {
        gi[j] = sigmoid(gi[j]);
        gf[j] = sigmoid(gf[j]);
        gg[j] = std::tanh(gg[j]);
        go[j] = sigmoid(go[j]);
        const double c = gf[j] * c_prev[j] + gi[j] * gg[j];
        c_out[j] = c;
        tc_out[j] = std::tanh(c);
        h_out[j] = go[j] * tc_out[j];
    }
}

} // namespace detail

// Everything the backward pass needs from one forward run.
struct ForwardCache {
    int steps = 0;
    // Indexed [layer][t*width + j].
    std::vector<std::vector<double>> gates;  // width 4H, post-activation
    std::vector<std::vector<double>> c;      // width H
    std::vector<std::vector<double>> h;      // width H
    std::vector<std::vector<double>> tc;     // width H, tanh(c)
};

// Runs the stacked net over a window of steps*input_size values (step
// major) and applies the linear head to the last top-layer hidden state.
inline std::vector<double> forward(const LstmParams& p, std::span<const double> window,
                                   ForwardCache* cache = nullptr) {
    p.cfg.validate();
    const int in = p.cfg.input_size;
    const int h = p.cfg.hidden_size;
    const int layers = p.cfg.num_layers;
    if (window.empty() || window.size() % static_cast<std::size_t>(in) != 0)
        throw DimensionError("window length is not a multiple of input_size");
    const int steps = static_cast<int>(window.size() / static_cast<std::size_t>(in));

    if (cache) {
        cache->steps = steps;
        cache->gates.assign(layers, std::vector<double>(static_cast<std::size_t>(steps) * 4 * h));
        cache->c.assign(layers, std::vector<double>(static_cast<std::size_t>(steps) * h));
        cache->h.assign(layers, std::vector<double>(static_cast<std::size_t>(steps) * h));
        cache->tc.assign(layers, std::vector<double>(static_cast<std::size_t>(steps) * h));
    }

    std::vector<double> h_state(static_cast<std::size_t>(layers) * h, 0.0);
    std::vector<double> c_state(static_cast<std::size_t>(layers) * h, 0.0);
    std::vector<double> gates(static_cast<std::size_t>(4) * h);
    std::vector<double> tc(static_cast<std::size_t>(h));

    for (int t = 0; t < steps; ++t) {
        const double* x = window.data() + static_cast<std::size_t>(t) * in;
        for (int l = 0; l < layers; ++l) {
            const auto& lp = p.layers[static_cast<std::size_t>(l)];
            const int lin = p.layer_input(l);
            double* hs = h_state.data() + static_cast<std::size_t>(l) * h;
            double* cs = c_state.data() + static_cast<std::size_t>(l) * h;
            detail::cell_step(lin, h, lp.wx.data(), lp.wh.data(), lp.b.data(), x, hs, cs,
                              gates.data(), cs, hs, tc.data());
            if (cache) {
                std::copy_n(gates.data(), 4 * h,
                            cache->gates[l].data() + static_cast<std::size_t>(t) * 4 * h);
                std::copy_n(cs, h, cache->c[l].data() + static_cast<std::size_t>(t) * h);
                std::copy_n(hs, h, cache->h[l].data() + static_cast<std::size_t>(t) * h);
                std::copy_n(tc.data(), h, cache->tc[l].data() + static_cast<std::size_t>(t) * h);
            }
            x = hs;
        }
    }

    const double* h_top = h_state.data() + static_cast<std::size_t>(layers - 1) * h;
    std::vector<double> out(static_cast<std::size_t>(p.cfg.output_size));
    for (int k = 0; k < p.cfg.output_size; ++k) {
        const double* row = p.head_w.data() + static_cast<std::size_t>(k) * h;
        out[static_cast<std::size_t>(k)] =
            p.head_b[static_cast<std::size_t>(k)] + detail::dot(row, h_top, h);
    }
    return out;
}

inline double mse(std::span<const double> y, std::span<const double> target) {
    if (y.size() != target.size()) throw DimensionError("mse size mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
        const double d = y[k] - target[k];
        s += d * d;
    }
    return s / static_cast<double>(y.size());
}

struct BackwardResult {
    LstmParams grads;  // same shapes as the parameters
    std::vector<double> output;
    double loss = 0.0;
};

// Exact BPTT gradients of the MSE loss. Gradients are accumulated into
// `grads`, so callers can sum over a batch by reusing the struct.
inline void backward_accumulate(const LstmParams& p, std::span<const double> window,
                                std::span<const double> target, LstmParams& grads,
                                std::vector<double>* output_out = nullptr,
                                double* loss_out = nullptr) {
    const int in = p.cfg.input_size;
    const int h = p.cfg.hidden_size;
    const int layers = p.cfg.num_layers;
    const int out_sz = p.cfg.output_size;
    if (target.size() != static_cast<std::size_t>(out_sz))
        throw DimensionError("target size does not match output_size");

    ForwardCache cache;
    const std::vector<double> y = forward(p, window, &cache);
    const int steps = cache.steps;
    if (output_out) *output_out = y;
    if (loss_out) *loss_out = mse(y, target);

    // dL/dy for L = mean_k (y_k - t_k)^2.
    std::vector<double> dy(static_cast<std::size_t>(out_sz));
    for (int k = 0; k < out_sz; ++k)
        dy[static_cast<std::size_t>(k)] =
            2.0 * (y[static_cast<std::size_t>(k)] - target[k]) / static_cast<double>(out_sz);

    // Head gradients and the seed for dh at the last top-layer step.
    std::vector<std::vector<double>> dh_from_above(
        static_cast<std::size_t>(layers),
        std::vector<double>(static_cast<std::size_t>(steps) * h, 0.0));
    {
        const double* h_last =
            cache.h[static_cast<std::size_t>(layers - 1)].data() +
            static_cast<std::size_t>(steps - 1) * h;
        double* dh_seed = dh_from_above[static_cast<std::size_t>(layers - 1)].data() +
                          static_cast<std::size_t>(steps - 1) * h;
        for (int k = 0; k < out_sz; ++k) {
            const double d = dy[static_cast<std::size_t>(k)];
            grads.head_b[static_cast<std::size_t>(k)] += d;
            double* gw = grads.head_w.data() + static_cast<std::size_t>(k) * h;
            const double* hw = p.head_w.data() + static_cast<std::size_t>(k) * h;
            for (int j = 0; j < h; ++j) {
                gw[j] += d * h_last[j];
                dh_seed[j] += d * hw[j];
            }
        }
    }

    std::vector<double> dh(static_cast<std::size_t>(h));
    std::vector<double> dc(static_cast<std::size_t>(h));
    std::vector<double> dz(static_cast<std::size_t>(4) * h);

    for (int l = layers - 1; l >= 0; --l) {
        const auto& lp = p.layers[static_cast<std::size_t>(l)];
        auto& gl = grads.layers[static_cast<std::size_t>(l)];
        const int lin = p.layer_input(l);
        const auto& gates = cache.gates[static_cast<std::size_t>(l)];
        const auto& cs = cache.c[static_cast<std::size_t>(l)];
        const auto& tcs = cache.tc[static_cast<std::size_t>(l)];
        auto& above = dh_from_above[static_cast<std::size_t>(l)];

        std::fill(dc.begin(), dc.end(), 0.0);
        std::fill(dh.begin(), dh.end(), 0.0);

        for (int t = steps - 1; t >= 0; --t) {
            const double* g = gates.data() + static_cast<std::size_t>(t) * 4 * h;
            const double* gi = g;
            const double* gf = g + h;
            const double* gg = g + 2 * h;
            const double* go = g + 3 * h;
            const double* tc_t = tcs.data() + static_cast<std::size_t>(t) * h;
            const double* c_prev =
                t > 0 ? cs.data() + static_cast<std::size_t>(t - 1) * h : nullptr;

            // dh carries the recurrent term; add the contribution arriving
            // from the layer above / the head at this step.
            const double* ext = above.data() + static_cast<std::size_t>(t) * h;
            for (int j = 0; j < h; ++j) dh[static_cast<std::size_t>(j)] += ext[j];

            double* dzi = dz.data();
            double* dzf = dz.data() + h;
            double* dzg = dz.data() + 2 * h;
            double* dzo = dz.data() + 3 * h;
            for (int j = 0; j < h; ++j) {
                const double dho = dh[static_cast<std::size_t>(j)];
                const double dcj = dc[static_cast<std::size_t>(j)] +
                                   dho * go[j] * (1.0 - tc_t[j] * tc_t[j]);
                const double cp = c_prev ? c_prev[j] : 0.0;
                const double di = dcj * gg[j];
                const double df = dcj * cp;
                const double dg = dcj * gi[j];
                const double do_ = dho * tc_t[j];
                dzi[j] = di * gi[j] * (1.0 - gi[j]);
                dzf[j] = df * gf[j] * (1.0 - gf[j]);
                dzg[j] = dg * (1.0 - gg[j] * gg[j]);
                dzo[j] = do_ * go[j] * (1.0 - go[j]);
                dc[static_cast<std::size_t>(j)] = dcj * gf[j];  // to t-1
            }

            const double* x_t =
                l == 0 ? window.data() + static_cast<std::size_t>(t) * in
                       : cache.h[static_cast<std::size_t>(l - 1)].data() +
                             static_cast<std::size_t>(t) * h;
            const double* h_prev =
                t > 0 ? cache.h[static_cast<std::size_t>(l)].data() +
                            static_cast<std::size_t>(t - 1) * h
                      : nullptr;

            double* dx_below =
                l > 0 ? dh_from_above[static_cast<std::size_t>(l - 1)].data() +
                            static_cast<std::size_t>(t) * h
                      : nullptr;

            std::fill(dh.begin(), dh.end(), 0.0);  // becomes dh_{t-1}
            for (int r = 0; r < 4 * h; ++r) {
                const double d = dz[static_cast<std::size_t>(r)];
                gl.b[static_cast<std::size_t>(r)] += d;
                double* gwx = gl.wx.data() + static_cast<std::size_t>(r) * lin;
                for (int k = 0; k < lin; ++k) gwx[k] += d * x_t[k];
                if (dx_below) {
                    const double* wxr = lp.wx.data() + static_cast<std::size_t>(r) * lin;
                    for (int k = 0; k < lin; ++k) dx_below[k] += d * wxr[k];
                }
                double* gwh = gl.wh.data() + static_cast<std::size_t>(r) * h;
                const double* whr = lp.wh.data() + static_cast<std::size_t>(r) * h;
                if (h_prev) {
                    for (int k = 0; k < h; ++k) {
                        gwh[k] += d * h_prev[k];
                        dh[static_cast<std::size_t>(k)] += d * whr[k];
                    }
                } else {
                    // h_prev is zero at t = 0; only dh for t = -1 would be
                    // produced and nothing consumes it.
                }
            }
        }
    }
}

inline BackwardResult backward(const LstmParams& p, std::span<const double> window,
                               std::span<const double> target) {
    BackwardResult r;
    r.grads = LstmParams::zeros(p.cfg);
    backward_accumulate(p, window, target, r.grads, &r.output, &r.loss);
    return r;
}

// f32 mirror of a parameter set for the hot inference path (the stored
// weight precision is f32 anyway). Scratch buffers are reused; one
// instance serves one streaming session.
class InferenceLstm {
public:
    explicit InferenceLstm(const LstmParams& p) : cfg_(p.cfg) {
        cfg_.validate();
        layers_.resize(p.layers.size());
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            layers_[l].wx.assign(p.layers[l].wx.begin(), p.layers[l].wx.end());
            layers_[l].wh.assign(p.layers[l].wh.begin(), p.layers[l].wh.end());
            layers_[l].b.assign(p.layers[l].b.begin(), p.layers[l].b.end());
        }
        head_w_.assign(p.head_w.begin(), p.head_w.end());
        head_b_.assign(p.head_b.begin(), p.head_b.end());
        const std::size_t h = static_cast<std::size_t>(cfg_.hidden_size);
        h_.resize(static_cast<std::size_t>(cfg_.num_layers) * h);
        c_.resize(static_cast<std::size_t>(cfg_.num_layers) * h);
        gates_.resize(4 * h);
    }

    const LstmConfig& config() const { return cfg_; }

    std::vector<double> forward(std::span<const float> window) {
        const int in = cfg_.input_size;
        const int h = cfg_.hidden_size;
        if (window.empty() || window.size() % static_cast<std::size_t>(in) != 0)
            throw DimensionError("window length is not a multiple of input_size");
        const int steps = static_cast<int>(window.size() / static_cast<std::size_t>(in));

        std::fill(h_.begin(), h_.end(), 0.0f);
        std::fill(c_.begin(), c_.end(), 0.0f);

        for (int t = 0; t < steps; ++t) {
            const float* x = window.data() + static_cast<std::size_t>(t) * in;
            for (int l = 0; l < cfg_.num_layers; ++l) {
                const Layer& lp = layers_[static_cast<std::size_t>(l)];
                const int lin = l == 0 ? in : h;
                float* hs = h_.data() + static_cast<std::size_t>(l) * h;
                float* cs = c_.data() + static_cast<std::size_t>(l) * h;
                for (int r = 0; r < 4 * h; ++r) {
                    const float* wxr = lp.wx.data() + static_cast<std::size_t>(r) * lin;
                    const float* whr = lp.wh.data() + static_cast<std::size_t>(r) * h;
                    gates_[static_cast<std::size_t>(r)] = lp.b[static_cast<std::size_t>(r)] +
                                                          detail::dot(wxr, x, lin) +
                                                          detail::dot(whr, hs, h);
                }
                for (int j = 0; j < h; ++j) {
                    const float gi = 1.0f / (1.0f + std::exp(-gates_[static_cast<std::size_t>(j)]));
                    const float gf =
                        1.0f / (1.0f + std::exp(-gates_[static_cast<std::size_t>(h + j)]));
                    const float gg = std::tanh(gates_[static_cast<std::size_t>(2 * h + j)]);
                    const float go =
                        1.0f / (1.0f + std::exp(-gates_[static_cast<std::size_t>(3 * h + j)]));
                    cs[j] = gf * cs[j] + gi * gg;
                    hs[j] = go * std::tanh(cs[j]);
                }
                x = hs;
            }
        }

        const float* h_top = h_.data() + static_cast<std::size_t>(cfg_.num_layers - 1) * h;
        std::vector<double> out(static_cast<std::size_t>(cfg_.output_size));
        for (int k = 0; k < cfg_.output_size; ++k) {
            const float* row = head_w_.data() + static_cast<std::size_t>(k) * h;
            float s = head_b_[static_cast<std::size_t>(k)];
            for (int j = 0; j < h; ++j) s += row[j] * h_top[j];
            out[static_cast<std::size_t>(k)] = static_cast<double>(s);
        }
        return out;
    }

private:
    struct Layer {
        std::vector<float> wx, wh, b;
    };
    LstmConfig cfg_;
    std::vector<Layer> layers_;
    std::vector<float> head_w_, head_b_;
    std::vector<float> h_, c_, gates_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct Sample {
    std::vector<double> window;
    std::vector<double> target;
};

struct TrainConfig {
    double lr = 1e-3;
    double lr_decay = 1.0;  // per-epoch multiplier
    int epochs = 10;
    int batch = 16;
    std::uint64_t seed = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 5.0;  // global gradient-norm clip; <= 0 disables
};

struct TrainResult {
    std::vector<double> epoch_loss;
};

// Adam over mini-batches. Same seed, same data, same build => identical
// loss curves and parameters.
inline TrainResult train(LstmParams& params, const std::vector<Sample>& data,
                         const TrainConfig& cfg,
                         const std::function<void(int, double)>& on_epoch = {}) {
    if (data.empty()) throw DatasetError("training dataset is empty");
    for (const auto& s : data) {
        if (s.window.size() != data.front().window.size() ||
            s.target.size() != static_cast<std::size_t>(params.cfg.output_size))
            throw DatasetError("inconsistent sample shapes in dataset");
    }
    if (cfg.epochs < 0 || cfg.batch < 1) throw ValidationError("bad train config");

    LstmParams grads = LstmParams::zeros(params.cfg);
    LstmParams m = LstmParams::zeros(params.cfg);
    LstmParams v = LstmParams::zeros(params.cfg);
    auto p_t = params.tensors();
    auto g_t = grads.tensors();
    auto m_t = m.tensors();
    auto v_t = v.tensors();

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    std::mt19937_64 rng(cfg.seed);
    std::int64_t adam_t = 0;

    double lr = cfg.lr;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0) lr *= cfg.lr_decay;
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss_sum = 0.0;
        std::size_t seen = 0;

        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
            const double inv_n = 1.0 / static_cast<double>(end - start);

            for (auto& t : g_t) std::fill(t.data->begin(), t.data->end(), 0.0);
            double batch_loss = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const Sample& s = data[order[i]];
                double loss = 0.0;
                backward_accumulate(params, s.window, s.target, grads, nullptr, &loss);
                batch_loss += loss;
            }
            batch_loss *= inv_n;
            epoch_loss_sum += batch_loss * static_cast<double>(end - start);
            seen += end - start;

            if (!std::isfinite(batch_loss))
                throw DatasetError("loss became non-finite at epoch " + std::to_string(epoch) +
                                   ", batch starting " + std::to_string(start));

            for (auto& t : g_t)
                for (auto& g : *t.data) g *= inv_n;

            if (cfg.clip_norm > 0.0) {
                double norm2 = 0.0;
                for (auto& t : g_t)
                    for (double g : *t.data) norm2 += g * g;
                const double norm = std::sqrt(norm2);
                if (norm > cfg.clip_norm) {
                    const double scale = cfg.clip_norm / norm;
                    for (auto& t : g_t)
                        for (auto& g : *t.data) g *= scale;
                }
            }

            ++adam_t;
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam_t));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam_t));
            for (std::size_t ti = 0; ti < p_t.size(); ++ti) {
                auto& pv = *p_t[ti].data;
                auto& gv = *g_t[ti].data;
                auto& mv = *m_t[ti].data;
                auto& vv = *v_t[ti].data;
                for (std::size_t j = 0; j < pv.size(); ++j) {
                    mv[j] = cfg.beta1 * mv[j] + (1.0 - cfg.beta1) * gv[j];
                    vv[j] = cfg.beta2 * vv[j] + (1.0 - cfg.beta2) * gv[j] * gv[j];
                    const double mhat = mv[j] / bc1;
                    const double vhat = vv[j] / bc2;
                    pv[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
                }
            }
        }

        const double epoch_loss = epoch_loss_sum / static_cast<double>(seen);
        result.epoch_loss.push_back(epoch_loss);
        if (on_epoch) on_epoch(epoch, epoch_loss);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Weight file ("WMCW"): magic (4), version u16, num_layers u16,
// input u32, hidden u32, output u32, then flat little-endian f32 arrays in
// order: per layer wx, wh, b; head_w; head_b.
// ---------------------------------------------------------------------------

inline constexpr char kWeightsMagic[4] = {'W', 'M', 'C', 'W'};
inline constexpr std::uint16_t kWeightsVersion = 1;

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32_array(std::string& out, const std::vector<double>& xs) {
    for (double x : xs) {
        const float f = static_cast<float>(x);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    bool need(std::size_t n) const { return pos + n <= buf.size(); }
    std::uint16_t u16() {
        const auto* p = reinterpret_cast<const std::uint8_t*>(buf.data() + pos);
        pos += 2;
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
    std::uint32_t u32() {
        const auto* p = reinterpret_cast<const std::uint8_t*>(buf.data() + pos);
        pos += 4;
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }
    void f32_array(std::vector<double>& xs) {
        for (auto& x : xs) {
            const std::uint32_t bits = u32();
            float f;
            std::memcpy(&f, &bits, 4);
            x = static_cast<double>(f);
        }
    }
};

} // namespace detail

inline void save_weights(const LstmParams& p, const std::string& path) {
    std::string out;
    out.append(kWeightsMagic, 4);
    detail::put_u16(out, kWeightsVersion);
    detail::put_u16(out, static_cast<std::uint16_t>(p.cfg.num_layers));
    detail::put_u32(out, static_cast<std::uint32_t>(p.cfg.input_size));
    detail::put_u32(out, static_cast<std::uint32_t>(p.cfg.hidden_size));
    detail::put_u32(out, static_cast<std::uint32_t>(p.cfg.output_size));
    for (const auto& l : p.layers) {
        detail::put_f32_array(out, l.wx);
        detail::put_f32_array(out, l.wh);
        detail::put_f32_array(out, l.b);
    }
    detail::put_f32_array(out, p.head_w);
    detail::put_f32_array(out, p.head_b);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw WeightsError("cannot open weights file for write: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw WeightsError("short write to weights file: " + path);
}

inline LstmParams load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw WeightsError("cannot open weights file: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 4 || std::memcmp(buf.data(), kWeightsMagic, 4) != 0)
        throw WeightsError("bad magic in weights file: " + path);
    detail::ByteReader r{buf, 4};
    if (!r.need(2 + 2 + 4 + 4 + 4)) throw WeightsError("corrupt weights header: " + path);
    const std::uint16_t version = r.u16();
    if (version != kWeightsVersion)
        throw WeightsError("unsupported weights version " + std::to_string(version) + " in " +
                           path);
    LstmConfig cfg;
    cfg.num_layers = r.u16();
    cfg.input_size = static_cast<int>(r.u32());
    cfg.hidden_size = static_cast<int>(r.u32());
    cfg.output_size = static_cast<int>(r.u32());
    if (cfg.num_layers < 1 || cfg.num_layers > 64 || cfg.input_size < 1 ||
        cfg.input_size > 1 << 16 || cfg.hidden_size < 1 || cfg.hidden_size > 1 << 16 ||
        cfg.output_size < 1 || cfg.output_size > 1 << 16)
        throw WeightsError("implausible shape header in weights file: " + path);

    LstmParams p = LstmParams::zeros(cfg);
    std::size_t floats = 0;
    for (int l = 0; l < cfg.num_layers; ++l)
        floats += p.layers[static_cast<std::size_t>(l)].wx.size() +
                  p.layers[static_cast<std::size_t>(l)].wh.size() +
                  p.layers[static_cast<std::size_t>(l)].b.size();
    floats += p.head_w.size() + p.head_b.size();
    if (!r.need(floats * 4)) throw WeightsError("corrupt weights file (truncated): " + path);
    if (buf.size() != r.pos + floats * 4)
        throw WeightsError("corrupt weights file (trailing bytes): " + path);

    for (auto& l : p.layers) {
        r.f32_array(l.wx);
        r.f32_array(l.wh);
        r.f32_array(l.b);
    }
    r.f32_array(p.head_w);
    r.f32_array(p.head_b);
    return p;
}

} // namespace wearmocap::lstm
