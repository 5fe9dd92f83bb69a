// Dataset fetch: HTTP download of the Speech Commands archive with size
// verification, and a gzip/ustar extractor built on zlib.
#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lambdakws/error.hpp"
#include "lambdakws/log.hpp"

namespace lambdakws {

namespace detail {

inline std::uint64_t parse_octal(const char* field, std::size_t len) {
    std::uint64_t value = 0;
    for (std::size_t i = 0; i < len; ++i) {
        const char c = field[i];
        if (c == '\0' || c == ' ') {
            if (value > 0 || i > 0) break;
            continue;
        }
        if (c < '0' || c > '7') {
            throw DecodeError("tar: malformed octal size field");
        }
        value = value * 8 + static_cast<std::uint64_t>(c - '0');
    }
    return value;
}

inline bool is_zero_block(const char* block) {
    for (int i = 0; i < 512; ++i) {
        if (block[i] != 0) return false;
    }
    return true;
}

inline void check_safe_relative(const std::string& name) {
    if (name.empty() || name[0] == '/') {
        throw DecodeError("tar: refusing absolute member path '" + name + "'");
    }
    std::size_t pos = 0;
    while (pos < name.size()) {
        auto next = name.find('/', pos);
        if (next == std::string::npos) next = name.size();
        if (name.substr(pos, next - pos) == "..") {
            throw DecodeError("tar: refusing member path escaping the archive: '" + name + "'");
        }
        pos = next + 1;
    }
}

}  // namespace detail

// Extract a .tar.gz (or plain .tar read through zlib, which passes
// uncompressed data unchanged) into dest_dir. Only regular files and
// directories are materialized; other member types are skipped.
inline void extract_tar_gz(const std::string& archive_path, const std::string& dest_dir) {
    namespace fs = std::filesystem;
    gzFile gz = gzopen(archive_path.c_str(), "rb");
    if (gz == nullptr) {
        throw IoError("extract: cannot open archive " + archive_path);
    }
    struct Closer {
        gzFile f;
        ~Closer() { gzclose(f); }
    } closer{gz};

    fs::create_directories(dest_dir);
    char block[512];
    std::vector<char> buf(1 << 16);
    while (true) {
        const int got = gzread(gz, block, 512);
        if (got == 0) break;  // clean EOF
        if (got != 512) throw DecodeError("tar: truncated header in " + archive_path);
        if (detail::is_zero_block(block)) break;  // end-of-archive marker

        std::string name(block, strnlen(block, 100));
        // ustar prefix field extends the name.
        if (std::memcmp(block + 257, "ustar", 5) == 0) {
            const std::string prefix(block + 345, strnlen(block + 345, 155));
            if (!prefix.empty()) name = prefix + "/" + name;
        }
        detail::check_safe_relative(name);
        const std::uint64_t size = detail::parse_octal(block + 124, 12);
        const char type = block[156];

        const fs::path target = fs::path(dest_dir) / name;
        if (type == '5') {
            fs::create_directories(target);
        } else if (type == '0' || type == '\0') {
            fs::create_directories(target.parent_path());
            std::ofstream out(target, std::ios::binary);
            if (!out) throw IoError("extract: cannot write " + target.string());
            std::uint64_t remaining = size;
            while (remaining > 0) {
                const auto chunk = static_cast<unsigned>(
                    std::min<std::uint64_t>(remaining, buf.size()));
                const int r = gzread(gz, buf.data(), chunk);
                if (r <= 0) throw DecodeError("tar: truncated member '" + name + "'");
                out.write(buf.data(), r);
                remaining -= static_cast<std::uint64_t>(r);
            }
        } else {
            // Skip link/device members.
            std::uint64_t remaining = size;
            while (remaining > 0) {
                const auto chunk = static_cast<unsigned>(
                    std::min<std::uint64_t>(remaining, buf.size()));
                const int r = gzread(gz, buf.data(), chunk);
                if (r <= 0) throw DecodeError("tar: truncated member '" + name + "'");
                remaining -= static_cast<std::uint64_t>(r);
            }
        }
        // Advance over the padding to the next 512-byte boundary.
        const std::uint64_t pad = (512 - size % 512) % 512;
        if (pad > 0 && gzread(gz, block, static_cast<unsigned>(pad)) !=
                           static_cast<int>(pad)) {
            throw DecodeError("tar: truncated padding in " + archive_path);
        }
    }
}

struct FetchOptions {
    std::string url =
        "http://download.tensorflow.org/data/speech_commands_v0.02.tar.gz";
    // 0 means "trust the server's Content-Length".
    std::uint64_t expected_bytes = 0;
    bool keep_archive = false;
};

// Implemented in terms of cpp-httplib; declared here and defined in
// fetch_http.hpp so that binaries without networking needs avoid the
// dependency.
void http_download(const std::string& url, const std::string& dest_path,
                   std::uint64_t expected_bytes);

// Download the archive into <root>/speech_commands.tar.gz, verify its size
// and extract it into root. Writes only under root.
inline void fetch_dataset(const std::string& root, const FetchOptions& options = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    const auto archive = (fs::path(root) / "speech_commands.tar.gz").string();
    http_download(options.url, archive, options.expected_bytes);
    log_warn("fetch: extracting " + archive);
    extract_tar_gz(archive, root);
    if (!options.keep_archive) fs::remove(archive);
}

}  // namespace lambdakws
