// Minimal warning log with a swappable sink (tests capture it).
#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <utility>

namespace lambdakws {

using LogSink = std::function<void(const std::string&)>;

inline LogSink& log_sink() {
    static LogSink sink = [](const std::string& msg) {
        std::fprintf(stderr, "[lambdakws] %s\n", msg.c_str());
    };
    return sink;
}

inline void set_log_sink(LogSink sink) { log_sink() = std::move(sink); }

inline void log_warn(const std::string& msg) {
    if (log_sink()) log_sink()(msg);
}

}  // namespace lambdakws
