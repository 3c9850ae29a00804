#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace lf {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

// Level comes from LAYERFLOW_KIT_LOG={error,info,debug}; default info.
inline LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("LAYERFLOW_KIT_LOG");
        if (env == nullptr) return LogLevel::kInfo;
        if (std::strcmp(env, "error") == 0) return LogLevel::kError;
        if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
        return LogLevel::kInfo;
    }();
    return level;
}

inline void log_error(const std::string& msg) {
    std::fprintf(stderr, "[error] %s\n", msg.c_str());
}

inline void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::kInfo) std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

inline void log_debug(const std::string& msg) {
    if (log_level() >= LogLevel::kDebug) std::fprintf(stderr, "[debug] %s\n", msg.c_str());
}

}  // namespace lf
