#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <sstream>
#include <string>

namespace wearmocap::log {

enum class Level : int { error = 0, warn = 1, info = 2, debug = 3 };

namespace detail {

inline Level level_from_env() {
    const char* env = std::getenv("WEARMOCAP_LOG");
    if (!env) return Level::info;
    if (std::strcmp(env, "error") == 0) return Level::error;
    if (std::strcmp(env, "warn") == 0) return Level::warn;
    if (std::strcmp(env, "info") == 0) return Level::info;
    if (std::strcmp(env, "debug") == 0) return Level::debug;
    return Level::info;
}

inline Level& threshold() {
    static Level lvl = level_from_env();
    return lvl;
}

inline std::mutex& mutex() {
    static std::mutex m;
    return m;
}

inline const char* tag(Level lvl) {
    switch (lvl) {
        case Level::error: return "error";
        case Level::warn: return "warn";
        case Level::info: return "info";
        case Level::debug: return "debug";
    }
    return "?";
}

template <typename... Args>
void emit(Level lvl, Args&&... args) {
    if (lvl > threshold()) return;
    std::ostringstream oss;
    (oss << ... << args);
    std::lock_guard<std::mutex> lock(mutex());
    std::fprintf(stderr, "[wearmocap %s] %s\n", tag(lvl), oss.str().c_str());
}

} // namespace detail

inline void set_level(Level lvl) { detail::threshold() = lvl; }

template <typename... Args>
void error(Args&&... args) { detail::emit(Level::error, std::forward<Args>(args)...); }
template <typename... Args>
void warn(Args&&... args) { detail::emit(Level::warn, std::forward<Args>(args)...); }
template <typename... Args>
void info(Args&&... args) { detail::emit(Level::info, std::forward<Args>(args)...); }
template <typename... Args>
void debug(Args&&... args) { detail::emit(Level::debug, std::forward<Args>(args)...); }

} // namespace wearmocap::log
