#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "wearmocap/lstm.hpp"

using namespace wearmocap;
using namespace wearmocap::lstm;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

LstmParams random_params(const LstmConfig& cfg, std::uint64_t seed) {
    LstmParams p = LstmParams::random_init(cfg, seed);
    return p;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_SUITE("lstm") {

TEST_CASE("zero parameters give zero hidden states and bias output") {
    LstmConfig cfg{2, 4, 3, 5};
    LstmParams p = LstmParams::zeros(cfg);
    std::mt19937_64 rng(1);
    const auto window = random_vec(3 * 6, rng);

    ForwardCache cache;
    const auto y = forward(p, window, &cache);
    REQUIRE(y.size() == 5);
    for (double v : y) CHECK(v == 0.0);
    for (const auto& hs : cache.h)
        for (double v : hs) CHECK(v == 0.0);

    p.head_b = {1.0, -2.0, 0.5, 0.0, 3.0};
    const auto y2 = forward(p, window);
    CHECK(y2[0] == 1.0);
    CHECK(y2[1] == -2.0);
    CHECK(y2[4] == 3.0);
}

TEST_CASE("single cell matches the hand-computed oracle") {
    // 1 layer, hidden 1, input 1, two steps; the expected numbers were
    // computed by hand from the cell equations before this test was wired
    // up (sigmoid gates, tanh candidate, y = 2 h_2 + 0.5).
    LstmConfig cfg{1, 1, 1, 1};
    LstmParams p = LstmParams::zeros(cfg);
    p.layers[0].wx = {0.5, -0.3, 0.8, 1.0};   // i, f, g, o
    p.layers[0].wh = {0.2, -0.1, 0.4, 0.3};
    p.layers[0].b = {0.1, 0.2, -0.2, 0.0};
    p.head_w = {2.0};
    p.head_b = {0.5};

    const std::vector<double> window = {1.0, -0.5};
    ForwardCache cache;
    const auto y = forward(p, window, &cache);

    CHECK(cache.h[0][0] == doctest::Approx(0.2438004583717564).epsilon(1e-14));
    CHECK(cache.c[0][0] == doctest::Approx(0.34674943968811439).epsilon(1e-14));
    CHECK(cache.h[0][1] == doctest::Approx(-0.0074788793725318655).epsilon(1e-12));
    CHECK(y[0] == doctest::Approx(0.48504224125493628).epsilon(1e-14));
}

TEST_CASE("full-sized model has the right output shape") {
    LstmConfig cfg{3, 128, 14, 8};
    LstmParams p = random_params(cfg, 2);
    std::mt19937_64 rng(3);
    const auto window = random_vec(25 * 14, rng);
    const auto y = forward(p, window);
    CHECK(y.size() == 8);
    for (double v : y) CHECK(std::isfinite(v));
}

TEST_CASE("shape mismatches are rejected") {
    LstmConfig cfg{1, 4, 3, 2};
    LstmParams p = random_params(cfg, 4);
    std::vector<double> bad(7, 0.0);  // not a multiple of input_size
    CHECK_THROWS_AS(forward(p, bad), DimensionError);
    std::vector<double> window(9, 0.1);
    std::vector<double> target(3, 0.0);  // output_size is 2
    CHECK_THROWS_AS(backward(p, window, target), DimensionError);
}

TEST_CASE("hidden states stay inside (-1, 1)") {
    std::mt19937_64 rng(5);
    for (int it = 0; it < 20; ++it) {
        LstmConfig cfg{2, 8, 4, 2};
        LstmParams p = random_params(cfg, 100 + static_cast<std::uint64_t>(it));
        // Exaggerate the weights; the output gate times tanh still bounds h.
        for (auto& l : p.layers) {
            for (auto& w : l.wx) w *= 10.0;
            for (auto& w : l.wh) w *= 10.0;
        }
        ForwardCache cache;
        forward(p, random_vec(6 * 4, rng, 3.0), &cache);
        for (const auto& hs : cache.h)
            for (double v : hs) {
                CHECK(v > -1.0);
                CHECK(v < 1.0);
            }
    }
}

TEST_CASE("target equal to output gives zero loss and zero gradients") {
    LstmConfig cfg{2, 4, 3, 2};
    LstmParams p = random_params(cfg, 6);
    std::mt19937_64 rng(7);
    const auto window = random_vec(5 * 3, rng);
    const auto y = forward(p, window);
    const auto r = backward(p, window, y);
    CHECK(r.loss == 0.0);
    LstmParams g = r.grads;
    for (auto& t : g.tensors())
        for (double v : *t.data) CHECK(v == 0.0);
}

TEST_CASE("head bias gradient is the scaled output error") {
    LstmConfig cfg{1, 4, 2, 3};
    LstmParams p = random_params(cfg, 8);
    std::mt19937_64 rng(9);
    const auto window = random_vec(4 * 2, rng);
    const std::vector<double> target = {0.3, -0.1, 0.7};
    auto r = backward(p, window, target);
    for (int k = 0; k < 3; ++k) {
        const double expect = 2.0 / 3.0 * (r.output[size_t(k)] - target[size_t(k)]);
        CHECK(r.grads.head_b[size_t(k)] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("analytic gradients match central finite differences") {
    // 2 layers, hidden 4: every parameter tensor, step 1e-5, f64,
    // relative error < 1e-4.
    LstmConfig cfg{2, 4, 3, 2};
    LstmParams p = random_params(cfg, 10);
    std::mt19937_64 rng(11);
    const auto window = random_vec(3 * 3, rng);
    const std::vector<double> target = {0.25, -0.5};

    auto analytic = backward(p, window, target);

    const double step = 1e-5;
    auto tensors = p.tensors();
    auto grad_tensors = analytic.grads.tensors();
    double worst = 0.0;
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        auto& vec = *tensors[ti].data;
        auto& gvec = *grad_tensors[ti].data;
        for (std::size_t j = 0; j < vec.size(); ++j) {
            const double saved = vec[j];
            vec[j] = saved + step;
            const double lp = mse(forward(p, window), target);
            vec[j] = saved - step;
            const double lm = mse(forward(p, window), target);
            vec[j] = saved;
            const double numeric = (lp - lm) / (2.0 * step);
            const double denom = std::max({std::abs(numeric), std::abs(gvec[j]), 1e-8});
            const double rel = std::abs(numeric - gvec[j]) / denom;
            worst = std::max(worst, rel);
            if (rel >= 1e-4) {
                CAPTURE(tensors[ti].name);
                CAPTURE(j);
                REQUIRE(rel < 1e-4);
            }
        }
    }
    MESSAGE("worst relative gradient error: ", worst);
    CHECK(worst < 1e-4);
}

TEST_CASE("training memorizes a small dataset") {
    LstmConfig cfg{1, 16, 4, 2};
    LstmParams p = random_params(cfg, 12);
    std::mt19937_64 rng(13);
    std::vector<Sample> data;
    for (int i = 0; i < 10; ++i)
        data.push_back({random_vec(5 * 4, rng), random_vec(2, rng, 0.5)});

    TrainConfig tc;
    tc.lr = 5e-3;
    tc.epochs = 500;
    tc.batch = 10;
    tc.seed = 14;
    const auto result = train(p, data, tc);

    double final_mse = 0.0;
    for (const auto& s : data) final_mse += mse(forward(p, s.window), s.target);
    final_mse /= static_cast<double>(data.size());
    MESSAGE("memorization MSE: ", final_mse);
    CHECK(final_mse < 1e-3);
    CHECK(result.epoch_loss.back() < result.epoch_loss.front());
}

TEST_CASE("zero learning rate leaves parameters untouched") {
    LstmConfig cfg{1, 8, 3, 2};
    LstmParams p = random_params(cfg, 15);
    const LstmParams before = p;
    std::mt19937_64 rng(16);
    std::vector<Sample> data{{random_vec(4 * 3, rng), {0.1, 0.2}},
                             {random_vec(4 * 3, rng), {-0.3, 0.4}}};
    TrainConfig tc;
    tc.lr = 0.0;
    tc.epochs = 5;
    tc.batch = 2;
    const auto result = train(p, data, tc);

    auto pt = p.tensors();
    auto bt = const_cast<LstmParams&>(before).tensors();
    for (std::size_t ti = 0; ti < pt.size(); ++ti) CHECK(*pt[ti].data == *bt[ti].data);
    for (double l : result.epoch_loss) CHECK(l == result.epoch_loss.front());
}

TEST_CASE("training is deterministic for a fixed seed") {
    LstmConfig cfg{1, 8, 3, 2};
    std::mt19937_64 rng(17);
    std::vector<Sample> data;
    for (int i = 0; i < 8; ++i) data.push_back({random_vec(4 * 3, rng), random_vec(2, rng)});

    TrainConfig tc;
    tc.epochs = 10;
    tc.batch = 3;
    tc.seed = 18;

    LstmParams p1 = random_params(cfg, 19);
    LstmParams p2 = random_params(cfg, 19);
    const auto r1 = train(p1, data, tc);
    const auto r2 = train(p2, data, tc);
    CHECK(r1.epoch_loss == r2.epoch_loss);
    auto t1 = p1.tensors(), t2 = p2.tensors();
    for (std::size_t ti = 0; ti < t1.size(); ++ti) CHECK(*t1[ti].data == *t2[ti].data);
}

TEST_CASE("empty dataset is rejected") {
    LstmConfig cfg{1, 4, 2, 1};
    LstmParams p = random_params(cfg, 20);
    std::vector<Sample> empty;
    CHECK_THROWS_AS(train(p, empty, TrainConfig{}), DatasetError);
}

TEST_CASE("weights round-trip through the file format") {
    LstmConfig cfg{2, 6, 5, 3};
    LstmParams p = random_params(cfg, 21);
    const std::string path = temp_path("wearmocap_weights_test.wmcw");
    save_weights(p, path);
    const LstmParams back = load_weights(path);

    CHECK(back.cfg == p.cfg);
    auto pt = p.tensors();
    auto bt = const_cast<LstmParams&>(back).tensors();
    for (std::size_t ti = 0; ti < pt.size(); ++ti) {
        REQUIRE(pt[ti].data->size() == bt[ti].data->size());
        for (std::size_t j = 0; j < pt[ti].data->size(); ++j)
            CHECK((*bt[ti].data)[j] == oracle::snap_f32((*pt[ti].data)[j]));
    }
    std::filesystem::remove(path);
}

TEST_CASE("truncated weight files are rejected") {
    LstmConfig cfg{1, 2, 1, 1};
    LstmParams p = random_params(cfg, 22);
    const std::string path = temp_path("wearmocap_weights_trunc.wmcw");
    save_weights(p, path);
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 5);
    CHECK_THROWS_AS(load_weights(path), WeightsError);
    std::filesystem::remove(path);

    CHECK_THROWS_AS(load_weights("/nonexistent/weights.wmcw"), WeightsError);
}

TEST_CASE("hand-built minimal weight file decodes to the chosen scalars") {
    // 1 layer, 1 hidden, 1 input, 1 output. Header 20 bytes, then 14 f32
    // values: wx(4), wh(4), b(4), head_w(1), head_b(1). Assembled byte by
    // byte below; values are 0.5, -1.0, 0.25 ... chosen to be f32-exact.
    std::string blob;
    blob.append("WMCW", 4);
    auto u16 = [&](std::uint16_t v) {
        blob.push_back(char(v & 0xff));
        blob.push_back(char(v >> 8));
    };
    auto u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) blob.push_back(char((v >> (8 * i)) & 0xff));
    };
    auto f32 = [&](float f) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        u32(bits);
    };
    u16(1);  // version
    u16(1);  // layers
    u32(1);  // input
    u32(1);  // hidden
    u32(1);  // output
    const float values[14] = {0.5f, -1.0f, 0.25f, 2.0f,   // wx: i f g o
                              0.125f, -0.5f, 1.5f, -2.0f, // wh
                              0.0f, 1.0f, -0.25f, 0.75f,  // b
                              3.0f,                       // head_w
                              -0.125f};                   // head_b
    for (float v : values) f32(v);
    REQUIRE(blob.size() == 20 + 14 * 4);

    const std::string path = temp_path("wearmocap_weights_minimal.wmcw");
    {
        std::ofstream f(path, std::ios::binary);
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    const LstmParams p = load_weights(path);
    CHECK(p.cfg.num_layers == 1);
    CHECK(p.layers[0].wx == std::vector<double>({0.5, -1.0, 0.25, 2.0}));
    CHECK(p.layers[0].wh == std::vector<double>({0.125, -0.5, 1.5, -2.0}));
    CHECK(p.layers[0].b == std::vector<double>({0.0, 1.0, -0.25, 0.75}));
    CHECK(p.head_w == std::vector<double>({3.0}));
    CHECK(p.head_b == std::vector<double>({-0.125}));
    std::filesystem::remove(path);
}

} // TEST_SUITE
