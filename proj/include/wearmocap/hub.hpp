#pragma once

// The live pipeline: UDP ingest -> per-device queues -> pairing ->
// estimation -> pose publishing, with an auto-calibration phase when no
// calibration file is supplied. One estimation thread per hub; ingestion
// runs concurrently on the socket thread.

#include <atomic>
#include <chrono>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "wearmocap/estimators.hpp"
#include "wearmocap/eval.hpp"
#include "wearmocap/log.hpp"
#include "wearmocap/wire.hpp"

namespace wearmocap::hub {

struct HubConfig {
    wire::TrackingMode mode = wire::TrackingMode::Pocket;
    wire::Endpoint bind{"0.0.0.0", 9500};
    std::vector<wire::Endpoint> subscribers;
    std::string weights_path;                           // LSTM modes
    std::optional<est::CalibrationOffsets> calibration;  // auto-calibrate when absent
    double auto_calib_seconds = 1.2;
    BodyMeasurements body;
    est::ModeConfig mode_cfg = est::ModeConfig::defaults(wire::TrackingMode::Pocket);
    double stats_period_s = 10.0;
    bool print_stats = true;
};

struct HubStats {
    wire::RouterStats router;
    std::uint64_t pairs = 0;
    std::uint64_t dropped_watch_pairing = 0;
    std::uint64_t poses_published = 0;
    std::uint64_t warmup_frames = 0;
    double median_latency_ms = 0.0;
    bool calibrated = false;
};

class HubService {
public:
    explicit HubService(HubConfig cfg)
        : cfg_(std::move(cfg)),
          router_(),
          ingest_(wire::UdpSocket::bound(cfg_.bind), router_),
          pairer_(cfg_.mode_cfg.pairing_tolerance_ms) {
        cfg_.body.validate();
        if (cfg_.mode != cfg_.mode_cfg.mode)
            throw ValidationError("hub mode and mode config disagree");
        if (cfg_.mode != wire::TrackingMode::Pocket) {
            // Load the model up front so a bad path fails fast.
            params_ = lstm::load_weights(cfg_.weights_path);
        }
        for (const auto& ep : cfg_.subscribers) publisher_.add_subscriber(ep);
        if (cfg_.calibration) build_estimator(*cfg_.calibration);
    }

    ~HubService() { stop(); }

    void start() {
        running_ = true;
        ingest_.start();
        worker_ = std::thread([this] { run(); });
    }

    void stop() {
        running_ = false;
        if (worker_.joinable()) worker_.join();
        ingest_.stop();
    }

    std::uint16_t port() const { return ingest_.port(); }

    HubStats stats() const {
        std::lock_guard<std::mutex> lock(stats_mu_);
        HubStats s = stats_;
        s.router = router_.stats();
        s.dropped_watch_pairing = pairer_.dropped_watch();
        s.median_latency_ms = median_latency();
        return s;
    }

private:
    using Clock = std::chrono::steady_clock;

    void build_estimator(const est::CalibrationOffsets& calib) {
        calib_ = calib;
        switch (cfg_.mode) {
            case wire::TrackingMode::WatchOnly:
                watch_only_.emplace(cfg_.mode_cfg, calib, cfg_.body, *params_);
                break;
            case wire::TrackingMode::UpperArm:
                upper_arm_.emplace(cfg_.mode_cfg, calib, cfg_.body, *params_);
                break;
            case wire::TrackingMode::Pocket:
                pocket_.emplace(cfg_.mode_cfg, calib, cfg_.body);
                break;
        }
        std::lock_guard<std::mutex> lock(stats_mu_);
        stats_.calibrated = true;
    }

    wire::DeviceKind phone_kind() const {
        return cfg_.mode == wire::TrackingMode::Pocket ? wire::DeviceKind::PhonePocket
                                                       : wire::DeviceKind::PhoneUpperArm;
    }

    void run() {
        auto next_stats = Clock::now() + std::chrono::duration<double>(cfg_.stats_period_s);
        while (running_) {
            if (!calib_) {
                collect_calibration();
            } else {
                pump_frames();
            }
            if (Clock::now() >= next_stats) {
                print_stats_line();
                next_stats = Clock::now() + std::chrono::duration<double>(cfg_.stats_period_s);
            }
        }
        print_stats_line();
    }

    // Gather the auto-calibration window, assuming the user holds the
    // ArmDown posture while streams come up.
    void collect_calibration() {
        epoch_ = router_.wait_any(epoch_, 100);
        while (auto watch = router_.queue(wire::DeviceKind::Watch).try_pop())
            calib_watch_.push_back(watch->frame);
        while (auto phone = router_.queue(phone_kind()).try_pop())
            calib_phone_.push_back(phone->frame);

        if (calib_watch_.empty()) return;
        const double span_us = static_cast<double>(calib_watch_.back().timestamp_us) -
                               static_cast<double>(calib_watch_.front().timestamp_us);
        if (span_us < cfg_.auto_calib_seconds * 1e6) return;
        if (cfg_.mode != wire::TrackingMode::WatchOnly && calib_phone_.size() < 2) return;

        std::map<wire::DeviceKind, std::vector<wire::SensorFrame>> captures;
        captures[wire::DeviceKind::Watch] = calib_watch_;
        if (cfg_.mode != wire::TrackingMode::WatchOnly)
            captures[phone_kind()] = calib_phone_;
        try {
            const auto calib = est::calibrate(captures, est::Posture::ArmDown, cfg_.body);
            build_estimator(calib);
            log::info("auto-calibration complete after ",
                      calib_watch_.size(), " watch frames");
        } catch (const CalibrationError& e) {
            log::warn("auto-calibration unstable (", e.spread_deg,
                      " deg); retrying with fresh frames");
            calib_watch_.clear();
            calib_phone_.clear();
        }
    }

    void pump_frames() {
        epoch_ = router_.wait_any(epoch_, 100);

        if (cfg_.mode == wire::TrackingMode::WatchOnly) {
            while (auto watch = router_.queue(wire::DeviceKind::Watch).try_pop())
                step_watch_only(*watch);
            return;
        }

        while (auto watch = router_.queue(wire::DeviceKind::Watch).try_pop()) {
            pairer_.push_watch(watch->frame);
            arrivals_[watch->frame.timestamp_us] = watch->arrival;
            if (arrivals_.size() > 1024) arrivals_.erase(arrivals_.begin());
        }
        while (auto phone = router_.queue(phone_kind()).try_pop())
            pairer_.push_phone(phone->frame);

        for (const auto& [w, p] : pairer_.drain()) {
            std::optional<est::ArmPose> pose;
            if (cfg_.mode == wire::TrackingMode::UpperArm)
                pose = upper_arm_->step(w, p);
            else
                pose = pocket_->step(w, p);
            finish_step(pose, w.timestamp_us);
        }
    }

    void step_watch_only(const wire::StampedFrame& stamped) {
        arrivals_[stamped.frame.timestamp_us] = stamped.arrival;
        if (arrivals_.size() > 1024) arrivals_.erase(arrivals_.begin());
        finish_step(watch_only_->step(stamped.frame), stamped.frame.timestamp_us);
    }

    void finish_step(const std::optional<est::ArmPose>& pose, std::uint64_t watch_ts) {
        if (!pose) {
            std::lock_guard<std::mutex> lock(stats_mu_);
            ++stats_.warmup_frames;
            return;
        }
        publisher_.publish(pose->to_message());
        const auto now = Clock::now();
        std::lock_guard<std::mutex> lock(stats_mu_);
        ++stats_.poses_published;
        ++stats_.pairs;
        const auto it = arrivals_.find(watch_ts);
        if (it != arrivals_.end()) {
            const double ms =
                std::chrono::duration<double, std::milli>(now - it->second).count();
            if (latencies_.size() < 8192)
                latencies_.push_back(ms);
            else
                latencies_[latency_cursor_++ % 8192] = ms;
        }
    }

    double median_latency() const {
        if (latencies_.empty()) return 0.0;
        std::vector<double> copy = latencies_;
        std::nth_element(copy.begin(), copy.begin() + copy.size() / 2, copy.end());
        return copy[copy.size() / 2];
    }

    void print_stats_line() {
        if (!cfg_.print_stats) return;
        const HubStats s = stats();
        std::printf(
            "[hub] frames=%llu poses=%llu drops(stale=%llu pair=%llu decode=%llu) "
            "median_latency=%.2fms %s\n",
            static_cast<unsigned long long>(s.router.delivered),
            static_cast<unsigned long long>(s.poses_published),
            static_cast<unsigned long long>(s.router.dropped_stale),
            static_cast<unsigned long long>(s.dropped_watch_pairing),
            static_cast<unsigned long long>(s.router.decode_errors), s.median_latency_ms,
            s.calibrated ? "tracking" : "calibrating");
        std::fflush(stdout);
    }

    HubConfig cfg_;
    wire::SessionRouter router_;
    wire::IngestServer ingest_;
    wire::PosePublisher publisher_;
    est::FramePairer pairer_;
    std::optional<lstm::LstmParams> params_;
    std::optional<est::CalibrationOffsets> calib_;
    std::optional<est::WatchOnlyEstimator> watch_only_;
    std::optional<est::UpperArmEstimator> upper_arm_;
    std::optional<est::PocketEstimator> pocket_;

    std::vector<wire::SensorFrame> calib_watch_, calib_phone_;
    std::map<std::uint64_t, Clock::time_point> arrivals_;
    std::vector<double> latencies_;
    std::size_t latency_cursor_ = 0;
    std::uint64_t epoch_ = 0;

    std::thread worker_;
    std::atomic<bool> running_{false};
    mutable std::mutex stats_mu_;
    HubStats stats_;
};

} // namespace wearmocap::hub
