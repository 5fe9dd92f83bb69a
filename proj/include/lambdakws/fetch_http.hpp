// HTTP download backend for fetch.hpp (cpp-httplib). Plain http only; for
// https mirrors download manually and extract with the same layout.
#pragma once

#include <httplib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "lambdakws/error.hpp"
#include "lambdakws/fetch.hpp"
#include "lambdakws/log.hpp"

namespace lambdakws {

inline void http_download(const std::string& url, const std::string& dest_path,
                          std::uint64_t expected_bytes) {
    if (url.rfind("http://", 0) != 0) {
        throw ConfigError("fetch: only http:// URLs are supported, got " + url);
    }
    const auto rest = url.substr(7);
    const auto slash = rest.find('/');
    const std::string host_port = slash == std::string::npos ? rest : rest.substr(0, slash);
    const std::string path = slash == std::string::npos ? "/" : rest.substr(slash);
    std::string host = host_port;
    int port = 80;
    if (const auto colon = host_port.find(':'); colon != std::string::npos) {
        host = host_port.substr(0, colon);
        port = std::stoi(host_port.substr(colon + 1));
    }

    httplib::Client client(host, port);
    client.set_follow_location(true);
    client.set_read_timeout(300, 0);

    std::ofstream out(dest_path, std::ios::binary);
    if (!out) throw IoError("fetch: cannot open " + dest_path + " for writing");
    std::uint64_t received = 0;
    auto res = client.Get(path, [&](const char* data, size_t len) {
        out.write(data, static_cast<std::streamsize>(len));
        received += len;
        return static_cast<bool>(out);
    });
    if (!res) {
        throw IoError("fetch: request to " + url + " failed: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw IoError("fetch: " + url + " returned status " + std::to_string(res->status));
    }
    out.flush();
    if (!out) throw IoError("fetch: writing " + dest_path + " failed");

    std::uint64_t want = expected_bytes;
    if (want == 0 && res->has_header("Content-Length")) {
        want = std::stoull(res->get_header_value("Content-Length"));
    }
    if (want != 0 && received != want) {
        throw IoError("fetch: size mismatch for " + dest_path + ": got " +
                      std::to_string(received) + " bytes, expected " + std::to_string(want));
    }
    log_warn("fetch: downloaded " + std::to_string(received) + " bytes to " + dest_path);
}

}  // namespace lambdakws
