// wearmocap: motion-capture hub, device simulator, trainer and evaluator
// in one binary. Exit codes: 0 ok, 2 config error, 3 bind error,
// 4 weights error, 5 calibration unstable.

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <thread>

#include "wearmocap/config.hpp"
#include "wearmocap/eval.hpp"
#include "wearmocap/hub.hpp"
#include "wearmocap/training.hpp"

using namespace wearmocap;

namespace {

std::atomic<bool> g_stop{false};

void handle_signal(int) { g_stop = true; }

wire::TrackingMode parse_mode(const std::string& s) {
    if (s == "watch_only") return wire::TrackingMode::WatchOnly;
    if (s == "upper_arm") return wire::TrackingMode::UpperArm;
    if (s == "pocket") return wire::TrackingMode::Pocket;
    throw ValidationError("unknown mode '" + s + "' (watch_only|upper_arm|pocket)");
}

sim::TrajectorySpec trajectory_flags(CLI::App* cmd, std::shared_ptr<sim::TrajectorySpec> spec,
                                     std::shared_ptr<std::string> yaw) {
    cmd->add_option("--seed", spec->seed, "trajectory seed");
    cmd->add_option("--duration", spec->duration_s, "seconds of motion");
    cmd->add_option("--rate", spec->rate_hz, "frame rate (Hz)");
    cmd->add_option("--keyposes", spec->keypose_count, "number of keyposes");
    cmd->add_option("--max-vel", spec->max_joint_vel, "joint angular velocity cap (rad/s)");
    cmd->add_option("--yaw", *yaw, "hip yaw profile: fixed|ramp|walk");
    return *spec;
}

int run_hub(const std::string& mode_str, const std::string& bind_str,
            const std::vector<std::string>& publish, const std::string& weights,
            const std::string& config_path, const std::string& calib_file,
            const CLI::App* cmd) {
    config::Map file;
    if (!config_path.empty()) file = config::load(config_path);
    auto pick = [&](const char* flag, const std::string& key, const std::string& cli_value,
                    const std::string& fallback) {
        if (cmd->count(flag) > 0) return cli_value;
        return config::get_str(file, key, fallback.empty() ? cli_value : fallback);
    };

    hub::HubConfig cfg;
    cfg.mode = parse_mode(pick("--mode", "mode", mode_str, ""));
    cfg.bind = wire::parse_endpoint(pick("--bind", "bind", bind_str, ""));
    cfg.weights_path = pick("--weights", "weights", weights, "");
    cfg.mode_cfg = est::ModeConfig::defaults(cfg.mode);
    cfg.mode_cfg.window = static_cast<int>(config::get_num(file, "window", 25));
    cfg.mode_cfg.pairing_tolerance_ms =
        config::get_num(file, "pairing_tolerance_ms", 50.0);
    cfg.mode_cfg.enkf.ensemble_size =
        static_cast<int>(config::get_num(file, "enkf_n", cfg.mode_cfg.enkf.ensemble_size));
    cfg.mode_cfg.enkf.q_std_la = config::get_num(file, "enkf_q_la", cfg.mode_cfg.enkf.q_std_la);
    cfg.mode_cfg.enkf.q_std_ua = config::get_num(file, "enkf_q_ua", cfg.mode_cfg.enkf.q_std_ua);
    cfg.mode_cfg.enkf.q_std_hi = config::get_num(file, "enkf_q_hi", cfg.mode_cfg.enkf.q_std_hi);
    cfg.mode_cfg.enkf.r_quat = config::get_num(file, "enkf_r_quat", cfg.mode_cfg.enkf.r_quat);
    cfg.mode_cfg.enkf.r_height =
        config::get_num(file, "enkf_r_height", cfg.mode_cfg.enkf.r_height);
    cfg.mode_cfg.enkf.seed =
        static_cast<std::uint64_t>(config::get_num(file, "enkf_seed", 1.0));
    cfg.body.upper_arm_len =
        config::get_num(file, "body_upper_arm_len", cfg.body.upper_arm_len);
    cfg.body.lower_arm_len =
        config::get_num(file, "body_lower_arm_len", cfg.body.lower_arm_len);
    cfg.body.shoulder_offset.x =
        config::get_num(file, "shoulder_offset_x", cfg.body.shoulder_offset.x);
    cfg.body.shoulder_offset.y =
        config::get_num(file, "shoulder_offset_y", cfg.body.shoulder_offset.y);
    cfg.body.shoulder_offset.z =
        config::get_num(file, "shoulder_offset_z", cfg.body.shoulder_offset.z);
    cfg.auto_calib_seconds = config::get_num(file, "auto_calib_seconds", 1.2);
    cfg.stats_period_s = config::get_num(file, "stats_period_s", 10.0);

    for (const auto& p : publish) cfg.subscribers.push_back(wire::parse_endpoint(p));
    {
        const std::string pub = config::get_str(file, "publish", "");
        if (publish.empty() && !pub.empty()) {
            std::stringstream ss(pub);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) cfg.subscribers.push_back(wire::parse_endpoint(item));
        }
    }

    const std::string calib_path = pick("--calib-file", "calib_file", calib_file, "");
    if (!calib_path.empty()) cfg.calibration = est::load_calibration(calib_path);

    hub::HubService service(std::move(cfg));
    service.start();
    std::printf("[hub] listening on port %u, mode %s\n", service.port(),
                wire::to_string(parse_mode(pick("--mode", "mode", mode_str, ""))));
    std::fflush(stdout);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    service.stop();
    return 0;
}

int run_calibrate(const std::string& bind_str, double seconds, const std::string& out) {
    wire::SessionRouter router;
    wire::IngestServer server(wire::UdpSocket::bound(wire::parse_endpoint(bind_str)), router);
    server.start();
    std::printf("[calibrate] hold the ArmDown posture; capturing %.1f s on port %u\n", seconds,
                server.port());
    std::fflush(stdout);

    std::map<wire::DeviceKind, std::vector<wire::SensorFrame>> captures;
    const auto deadline =
        std::chrono::steady_clock::now() + std::chrono::duration<double>(seconds);
    while (std::chrono::steady_clock::now() < deadline && !g_stop) {
        for (int k = 0; k < 3; ++k) {
            auto& q = router.queue(static_cast<wire::DeviceKind>(k));
            while (auto f = q.try_pop())
                captures[static_cast<wire::DeviceKind>(k)].push_back(f->frame);
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    server.stop();
    for (auto it = captures.begin(); it != captures.end();)
        it = it->second.empty() ? captures.erase(it) : std::next(it);

    const auto calib = est::calibrate(captures, est::Posture::ArmDown);
    for (const auto& [kind, frames] : captures) {
        double spread = 0.0;
        Quaternion mean = est::detail::mean_orientation(frames, &spread);
        (void)mean;
        std::printf("[calibrate] device kind %d: %zu frames, spread %.2f deg\n",
                    static_cast<int>(kind), frames.size(), spread);
    }
    est::save_calibration(calib, out);
    std::printf("[calibrate] wrote %s\n", out.c_str());
    return 0;
}

sim::Recording make_recording(const sim::TrajectorySpec& spec, const sim::NoiseConfig& noise) {
    sim::Recording rec;
    rec.truth = sim::gen_trajectory(spec);
    rec.sensors = sim::synth_sensors(rec.truth, noise);
    return rec;
}

int run_sim(const sim::TrajectorySpec& spec, const sim::NoiseConfig& noise,
            const std::string& target, bool realtime, double loss,
            const std::string& devices_csv, const std::string& out) {
    const sim::Recording rec = make_recording(spec, noise);
    if (!out.empty()) {
        sim::write_recording(rec, out);
        std::printf("[sim] wrote %zu frames to %s\n", rec.truth.size(), out.c_str());
    }
    if (!target.empty()) {
        std::vector<const std::vector<wire::SensorFrame>*> streams;
        std::stringstream ss(devices_csv);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item == "watch") streams.push_back(&rec.sensors.watch);
            else if (item == "phone_ua") streams.push_back(&rec.sensors.phone_upper);
            else if (item == "phone_pocket") streams.push_back(&rec.sensors.phone_pocket);
            else throw ValidationError("unknown device '" + item + "'");
        }
        sim::StreamOptions opts;
        opts.realtime = realtime;
        opts.loss_rate = loss;
        const auto report = sim::stream(streams, wire::parse_endpoint(target), opts);
        std::printf("[sim] sent=%zu dropped=%zu errors=%zu\n", report.sent, report.dropped,
                    report.send_errors);
    }
    return 0;
}

int run_train(const std::vector<std::string>& data, const std::string& mode_str, int epochs,
              double lr, int batch, std::uint64_t seed, int window, int stride, int layers,
              int hidden, const std::string& out) {
    training::DatasetOptions opts;
    opts.mode = parse_mode(mode_str);
    opts.window = window;
    opts.stride = stride;

    std::vector<sim::Recording> recordings;
    for (const auto& path : data) recordings.push_back(sim::read_recording(path));
    const auto dataset = training::build_dataset(recordings, opts);
    std::printf("[train] %zu samples, %d channels, window %d\n", dataset.size(),
                opts.mode == wire::TrackingMode::UpperArm ? est::kUpperArmChannels
                                                          : est::kWatchChannels,
                window);

    lstm::LstmConfig cfg;
    cfg.num_layers = layers;
    cfg.hidden_size = hidden;
    cfg.input_size =
        opts.mode == wire::TrackingMode::UpperArm ? est::kUpperArmChannels : est::kWatchChannels;
    cfg.output_size = est::kPoseOutputs;
    lstm::LstmParams params = lstm::LstmParams::random_init(cfg, seed);

    lstm::TrainConfig tc;
    tc.lr = lr;
    tc.epochs = epochs;
    tc.batch = batch;
    tc.seed = seed;
    lstm::train(params, dataset, tc, [](int epoch, double loss) {
        std::printf("[train] epoch %d loss %.9g\n", epoch, loss);
        std::fflush(stdout);
    });

    double final_mse = 0.0;
    for (const auto& s : dataset)
        final_mse += lstm::mse(lstm::forward(params, s.window), s.target);
    final_mse /= static_cast<double>(dataset.size());
    std::printf("[train] final training MSE %.9g\n", final_mse);

    lstm::save_weights(params, out);
    std::printf("[train] wrote %s\n", out.c_str());
    return 0;
}

int run_eval(const std::string& recording, const std::string& modes_csv,
             const std::string& weights_watch, const std::string& weights_upper, int window,
             const std::string& out) {
    const sim::Recording rec = sim::read_recording(recording);
    eval::CompareOptions opts;
    opts.watch_weights = weights_watch;
    opts.upper_weights = weights_upper;
    opts.window = window;
    if (modes_csv != "all") {
        opts.modes.clear();
        std::stringstream ss(modes_csv);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) opts.modes.push_back(parse_mode(item));
    }
    const auto rows = eval::compare_modes(rec, opts);
    std::fputs(eval::render_table(rows).c_str(), stdout);
    if (!out.empty()) {
        eval::write_report_csv(rows, out);
        std::printf("[eval] wrote %s\n", out.c_str());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);

    CLI::App app{"wearmocap: arm pose tracking from watch and phone streams"};
    app.require_subcommand(1);

    // hub
    auto* hub_cmd = app.add_subcommand("hub", "run the live tracking hub");
    std::string hub_mode = "pocket", hub_bind = "0.0.0.0:9500", hub_weights, hub_config,
                hub_calib;
    std::vector<std::string> hub_publish;
    hub_cmd->add_option("--mode", hub_mode, "watch_only|upper_arm|pocket");
    hub_cmd->add_option("--bind", hub_bind, "listen address host:port");
    hub_cmd->add_option("--publish", hub_publish, "pose subscriber host:port (repeatable)");
    hub_cmd->add_option("--weights", hub_weights, "model weights (.wmcw) for LSTM modes");
    hub_cmd->add_option("--config", hub_config, "flat key=value config file");
    hub_cmd->add_option("--calib-file", hub_calib, "calibration file (skips auto-calibration)");

    // calibrate
    auto* cal_cmd = app.add_subcommand("calibrate", "capture mounting offsets");
    std::string cal_bind = "0.0.0.0:9500", cal_out = "calibration.csv";
    double cal_seconds = 3.0;
    cal_cmd->add_option("--bind", cal_bind, "listen address host:port");
    cal_cmd->add_option("--seconds", cal_seconds, "capture length");
    cal_cmd->add_option("--out", cal_out, "output calibration file");

    // sim / record
    auto sim_spec = std::make_shared<sim::TrajectorySpec>();
    auto sim_yaw = std::make_shared<std::string>("fixed");
    auto* sim_cmd = app.add_subcommand("sim", "generate and stream virtual devices");
    trajectory_flags(sim_cmd, sim_spec, sim_yaw);
    std::string sim_target, sim_devices = "watch,phone_ua,phone_pocket", sim_out;
    bool sim_realtime = false;
    double sim_loss = 0.0;
    auto sim_noise = std::make_shared<sim::NoiseConfig>();
    sim_cmd->add_option("--target", sim_target, "stream to host:port");
    sim_cmd->add_flag("--realtime", sim_realtime, "pace sends to frame timestamps");
    sim_cmd->add_option("--loss", sim_loss, "injected packet loss rate [0,1)");
    sim_cmd->add_option("--devices", sim_devices, "comma list: watch,phone_ua,phone_pocket");
    sim_cmd->add_option("--out", sim_out, "also write a recording CSV");
    sim_cmd->add_option("--noise-seed", sim_noise->seed, "sensor noise seed");
    sim_cmd->add_option("--gyro-std", sim_noise->gyro_std, "gyro noise std (rad/s)");
    sim_cmd->add_option("--accel-std", sim_noise->accel_std, "accel noise std (m/s^2)");
    sim_cmd->add_option("--orient-std", sim_noise->orient_std, "orientation noise std (rad)");
    sim_cmd->add_option("--pressure-std", sim_noise->pressure_std, "pressure noise std (hPa)");

    auto rec_spec = std::make_shared<sim::TrajectorySpec>();
    auto rec_yaw = std::make_shared<std::string>("fixed");
    auto* rec_cmd = app.add_subcommand("record", "write a recording CSV");
    trajectory_flags(rec_cmd, rec_spec, rec_yaw);
    std::string rec_out;
    auto rec_noise = std::make_shared<sim::NoiseConfig>();
    rec_cmd->add_option("--out", rec_out, "output recording CSV")->required();
    rec_cmd->add_option("--noise-seed", rec_noise->seed, "sensor noise seed");
    rec_cmd->add_option("--gyro-std", rec_noise->gyro_std, "gyro noise std (rad/s)");
    rec_cmd->add_option("--accel-std", rec_noise->accel_std, "accel noise std (m/s^2)");
    rec_cmd->add_option("--orient-std", rec_noise->orient_std, "orientation noise std (rad)");
    rec_cmd->add_option("--pressure-std", rec_noise->pressure_std, "pressure noise std (hPa)");

    // train
    auto* train_cmd = app.add_subcommand("train", "train an LSTM mode model");
    std::vector<std::string> train_data;
    std::string train_mode = "upper_arm", train_out = "model.wmcw";
    int train_epochs = 10, train_batch = 16, train_window = 25, train_stride = 6,
        train_layers = 3, train_hidden = 128;
    double train_lr = 2e-3;
    std::uint64_t train_seed = 1;
    train_cmd->add_option("--data", train_data, "recording CSV (repeatable)")->required();
    train_cmd->add_option("--mode", train_mode, "watch_only|upper_arm");
    train_cmd->add_option("--epochs", train_epochs, "training epochs");
    train_cmd->add_option("--lr", train_lr, "Adam learning rate");
    train_cmd->add_option("--batch", train_batch, "mini-batch size");
    train_cmd->add_option("--seed", train_seed, "init/shuffle seed");
    train_cmd->add_option("--window", train_window, "window length (frames)");
    train_cmd->add_option("--stride", train_stride, "window stride (frames)");
    train_cmd->add_option("--layers", train_layers, "LSTM layers");
    train_cmd->add_option("--hidden", train_hidden, "hidden units per layer");
    train_cmd->add_option("--out", train_out, "output weights file");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "compare modes on a recording");
    std::string eval_recording, eval_modes = "all", eval_ww, eval_wu, eval_out = "report.csv";
    int eval_window = 25;
    eval_cmd->add_option("--recording", eval_recording, "recording CSV")->required();
    eval_cmd->add_option("--modes", eval_modes, "all or comma list of modes");
    eval_cmd->add_option("--weights-watch", eval_ww, "watch-only model weights");
    eval_cmd->add_option("--weights-upper", eval_wu, "upper-arm model weights");
    eval_cmd->add_option("--window", eval_window, "window length (frames)");
    eval_cmd->add_option("--out", eval_out, "output report CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (hub_cmd->parsed())
            return run_hub(hub_mode, hub_bind, hub_publish, hub_weights, hub_config, hub_calib,
                           hub_cmd);
        if (cal_cmd->parsed()) return run_calibrate(cal_bind, cal_seconds, cal_out);
        if (sim_cmd->parsed()) {
            sim_spec->yaw_profile = sim::yaw_profile_from_string(*sim_yaw);
            return run_sim(*sim_spec, *sim_noise, sim_target, sim_realtime, sim_loss,
                           sim_devices, sim_out);
        }
        if (rec_cmd->parsed()) {
            rec_spec->yaw_profile = sim::yaw_profile_from_string(*rec_yaw);
            return run_sim(*rec_spec, *rec_noise, "", false, 0.0, "", rec_out);
        }
        if (train_cmd->parsed())
            return run_train(train_data, train_mode, train_epochs, train_lr, train_batch,
                             train_seed, train_window, train_stride, train_layers, train_hidden,
                             train_out);
        if (eval_cmd->parsed())
            return run_eval(eval_recording, eval_modes, eval_ww, eval_wu, eval_window, eval_out);
    } catch (const BindError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const WeightsError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const CalibrationError& e) {
        std::fprintf(stderr, "error: calibration unstable, spread %.2f deg: %s\n", e.spread_deg,
                     e.what());
        return 5;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
