#include "ttsrl/common.hpp"

#include <atomic>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

namespace ttsrl {

namespace {
std::atomic<int> g_log_threshold{static_cast<int>(LogLevel::kInfo)};
std::mutex g_log_mutex;
}  // namespace

LogLevel log_threshold() { return static_cast<LogLevel>(g_log_threshold.load()); }
void set_log_threshold(LogLevel lv) { g_log_threshold.store(static_cast<int>(lv)); }

void log_line(LogLevel lv, const std::string& msg) {
    if (static_cast<int>(lv) < g_log_threshold.load()) return;
    static const char* names[] = {"DEBUG", "INFO", "WARN", "ERROR"};
    std::lock_guard<std::mutex> lock(g_log_mutex);
    std::fprintf(stderr, "[%s] %s\n", names[static_cast<int>(lv)], msg.c_str());
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failure: " + path);
    return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open file for writing: " + path);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failure: " + path);
}

uint64_t hash_file(const std::string& path) { return fnv1a64(read_file(path)); }

void parallel_chunks(size_t n, int threads,
                     const std::function<void(size_t, size_t, size_t)>& fn) {
    if (n == 0) return;
    const size_t nworkers =
        std::min<size_t>(n, static_cast<size_t>(threads < 1 ? 1 : threads));
    if (nworkers <= 1) {
        fn(0, 0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nworkers);
    std::exception_ptr first_error;
    std::mutex err_mutex;
    for (size_t w = 0; w < nworkers; ++w) {
        const size_t begin = n * w / nworkers;
        const size_t end = n * (w + 1) / nworkers;
        pool.emplace_back([&, w, begin, end]() {
            try {
                fn(w, begin, end);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    const size_t nthreads =
        std::min<size_t>(n, static_cast<size_t>(threads < 1 ? 1 : threads));
    if (nthreads <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mutex;
    for (size_t t = 0; t < nthreads; ++t) {
        pool.emplace_back([&]() {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace ttsrl
