#include <doctest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "wearmocap/eval.hpp"

using namespace wearmocap;
using namespace wearmocap::eval;

namespace {

std::vector<wire::PoseMessage> poses_from_truth(const std::vector<sim::GroundTruthFrame>& truth,
                                                const Vec3& offset = {}) {
    std::vector<wire::PoseMessage> out;
    for (const auto& f : truth) {
        wire::PoseMessage m;
        m.timestamp_us = f.timestamp_us;
        m.mode = wire::TrackingMode::WatchOnly;
        m.q_la = f.q_la;
        m.q_ua = f.q_ua;
        m.shoulder = f.joints.shoulder + offset;
        m.elbow = f.joints.elbow + offset;
        m.wrist = f.joints.wrist + offset;
        out.push_back(m);
    }
    return out;
}

} // namespace

TEST_SUITE("eval") {

TEST_CASE("position error of a perfect estimate is zero") {
    sim::TrajectorySpec spec;
    spec.duration_s = 2.0;
    spec.keypose_count = 2;
    const auto truth = sim::gen_trajectory(spec);
    const auto series = position_error(poses_from_truth(truth), truth);
    REQUIRE(series.size() == truth.size());
    for (double v : series) CHECK(v == 0.0);
}

TEST_CASE("a 3 cm translation reads as a constant 3 cm series") {
    sim::TrajectorySpec spec;
    spec.duration_s = 2.0;
    spec.keypose_count = 2;
    const auto truth = sim::gen_trajectory(spec);
    const auto series = position_error(poses_from_truth(truth, {0.03, 0.0, 0.0}), truth);
    for (double v : series) CHECK(v == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("disjoint streams raise an empty-overlap error") {
    sim::TrajectorySpec spec;
    spec.duration_s = 1.0;
    spec.keypose_count = 1;
    const auto truth = sim::gen_trajectory(spec);
    auto poses = poses_from_truth(truth);
    for (auto& p : poses) p.timestamp_us += 3600000000ull;  // an hour later
    CHECK_THROWS_AS(position_error(poses, truth), EvalError);
}

TEST_CASE("summarize basics") {
    const Summary single = summarize({6.8});
    CHECK(single.mean == doctest::Approx(6.8));
    CHECK(single.std == 0.0);
    CHECK(single.n == 1);

    // Sample std of {5.2, 6.8, 8.4} is exactly 1.6.
    const Summary row = summarize({5.2, 6.8, 8.4});
    CHECK(format_mean_std(row) == "6.8 ± 1.6");

    CHECK_THROWS_AS(summarize({}), EvalError);
}

TEST_CASE("summarize matches an independent two-pass computation") {
    std::mt19937_64 rng(1);
    std::lognormal_distribution<double> d(1.0, 0.75);
    std::vector<double> xs(10000);
    for (auto& v : xs) v = d(rng);

    const Summary s = summarize(xs);
    const auto ref = oracle::naive_stats(xs);
    CHECK(s.mean == doctest::Approx(ref.mean).epsilon(1e-9));
    CHECK(s.std == doctest::Approx(ref.std).epsilon(1e-9));
    CHECK(s.p95 == doctest::Approx(ref.p95).epsilon(1e-12));

    // Permutation invariance.
    std::shuffle(xs.begin(), xs.end(), rng);
    const Summary s2 = summarize(xs);
    CHECK(s2.mean == doctest::Approx(s.mean).epsilon(1e-12));
    CHECK(s2.p95 == s.p95);
}

TEST_CASE("kalman oracle limit cases") {
    SUBCASE("uninformative observations keep the prior") {
        ScalarKalmanSpec spec;
        spec.q = 0.0;
        spec.r = 1e12;
        spec.x0 = 2.5;
        spec.p0 = 0.04;
        const auto res = kalman_oracle(spec, std::vector<double>(50, 100.0));
        for (double m : res.means) CHECK(m == doctest::Approx(2.5).epsilon(1e-6));
        for (double v : res.variances) CHECK(v == doctest::Approx(0.04).epsilon(1e-6));
    }
    SUBCASE("steady-state variance solves the Riccati fixed point") {
        ScalarKalmanSpec spec;
        spec.q = 0.03;
        spec.r = 0.2;
        spec.x0 = 0.0;
        spec.p0 = 1.0;
        const auto res = kalman_oracle(spec, std::vector<double>(2000, 0.0));
        const double expect = oracle::riccati_fixed_point(spec.q, spec.r);
        CHECK(std::abs(res.variances.back() - expect) < 1e-9);
    }
    SUBCASE("invalid noise specs are rejected") {
        ScalarKalmanSpec bad;
        bad.r = 0.0;
        CHECK_THROWS_AS(kalman_oracle(bad, {1.0}), ValidationError);
        bad.r = 1.0;
        bad.q = -0.1;
        CHECK_THROWS_AS(kalman_oracle(bad, {1.0}), ValidationError);
    }
}

TEST_CASE("particle oracle agrees with the kalman oracle on a linear system") {
    const double q = 0.01, r = 0.04;
    const int steps = 60;
    std::mt19937_64 sim_rng(7);
    std::normal_distribution<double> gauss(0.0, 1.0);

    double truth = 1.0;
    std::vector<double> obs1d;
    for (int t = 0; t < steps; ++t) {
        truth += std::sqrt(q) * gauss(sim_rng);
        obs1d.push_back(truth + std::sqrt(r) * gauss(sim_rng));
    }

    ScalarKalmanSpec kspec;
    kspec.q = q;
    kspec.r = r;
    kspec.x0 = 1.0;
    kspec.p0 = 1.0;
    const auto kf = kalman_oracle(kspec, obs1d);

    ParticleFilterSpec pf;
    std::mt19937_64 init_rng(8);
    pf.init.assign(100000, {0.0});
    for (auto& p : pf.init) p[0] = 1.0 + gauss(init_rng);
    pf.propagate = [q](enkf::StateVec& s, std::mt19937_64& rng) {
        std::normal_distribution<double> g(0.0, std::sqrt(q));
        s[0] += g(rng);
    };
    pf.log_likelihood = [r](const enkf::StateVec& s, const enkf::ObsVec& o) {
        const double z = (o[0] - s[0]);
        return -0.5 * z * z / r;
    };

    std::vector<enkf::ObsVec> obs;
    for (double y : obs1d) obs.push_back({y});
    const auto estimates = particle_oracle(pf, obs, 9);

    double err2 = 0.0, ref2 = 0.0;
    for (int t = 0; t < steps; ++t) {
        err2 += (estimates[static_cast<std::size_t>(t)][0] -
                 kf.means[static_cast<std::size_t>(t)]) *
                (estimates[static_cast<std::size_t>(t)][0] -
                 kf.means[static_cast<std::size_t>(t)]);
        ref2 += kf.means[static_cast<std::size_t>(t)] * kf.means[static_cast<std::size_t>(t)];
    }
    const double rel = std::sqrt(err2 / ref2);
    MESSAGE("particle-vs-kalman relative RMS: ", rel);
    CHECK(rel < 0.02);
}

TEST_CASE("compare_modes on a recording") {
    sim::TrajectorySpec spec;
    spec.seed = 5;
    spec.duration_s = 6.0;
    spec.keypose_count = 3;
    spec.yaw_profile = sim::YawProfile::Ramp;
    sim::Recording rec;
    rec.truth = sim::gen_trajectory(spec);
    rec.sensors = sim::synth_sensors(rec.truth, sim::NoiseConfig{});

    SUBCASE("pocket mode alone runs without model files") {
        CompareOptions opts;
        opts.modes = {wire::TrackingMode::Pocket};
        const auto rows = compare_modes(rec, opts);
        REQUIRE(rows.size() == 1);
        CHECK(rows[0].stats.n > 300);
        CHECK(rows[0].stats.mean < 30.0);  // sanity: tracks at all
        CHECK(rows[0].ms_per_frame > 0.0);

        // Determinism: identical metric columns on a second run.
        const auto again = compare_modes(rec, opts);
        CHECK(again[0].stats.mean == rows[0].stats.mean);
        CHECK(again[0].stats.std == rows[0].stats.std);
        CHECK(again[0].stats.p95 == rows[0].stats.p95);
        CHECK(again[0].stats.n == rows[0].stats.n);

        const std::string table = render_table(rows);
        CHECK(table.find("pocket") != std::string::npos);
        CHECK(table.find("n") != std::string::npos);

        const auto path =
            (std::filesystem::temp_directory_path() / "wearmocap_report_test.csv").string();
        write_report_csv(rows, path);
        std::ifstream f(path);
        std::string header;
        std::getline(f, header);
        CHECK(header == "mode,mean_cm,std_cm,p95_cm,n,ms_per_frame");
        std::string line;
        std::getline(f, line);
        CHECK(line.substr(0, 7) == "pocket,");
        std::filesystem::remove(path);
    }
    SUBCASE("missing model files name the mode") {
        CompareOptions opts;
        opts.modes = {wire::TrackingMode::UpperArm};
        opts.upper_weights = "/nonexistent/upper.wmcw";
        try {
            compare_modes(rec, opts);
            FAIL("expected EvalError");
        } catch (const EvalError& e) {
            CHECK(std::string(e.what()).find("upper_arm") != std::string::npos);
        }
    }
}

} // TEST_SUITE
