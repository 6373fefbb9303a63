#pragma once

// Run shell commands with captured output. stdout/stderr are redirected to
// temporary files rather than pipes so large outputs never deadlock.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <fcntl.h>
#include <spawn.h>
#include <sys/file.h>
#include <sys/wait.h>
#include <unistd.h>

#include "optimas/error.hpp"
#include "optimas/text.hpp"

extern char** environ;

namespace optimas::process {

struct Result {
    int exit_code = -1; // 128+signal when killed by a signal
    std::string out;
    std::string err;
    std::int64_t wall_ns = 0;
};

class SpawnError : public Error {
public:
    using Error::Error;
};

namespace detail {

class TempFile {
public:
    TempFile() {
        auto dir = std::filesystem::temp_directory_path();
        std::string tmpl = (dir / "optimas-XXXXXX").string();
        std::vector<char> buf(tmpl.begin(), tmpl.end());
        buf.push_back('\0');
        int fd = ::mkstemp(buf.data());
        if (fd < 0) throw IoError("mkstemp failed");
        ::close(fd);
        path_ = buf.data();
    }
    ~TempFile() { std::error_code ec; std::filesystem::remove(path_, ec); }
    TempFile(const TempFile&) = delete;
    TempFile& operator=(const TempFile&) = delete;
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

} // namespace detail

// Runs `/bin/sh -c command` in `workdir` (current directory when empty) and
// waits for it. wall_ns covers spawn to reap.
inline Result run_shell(const std::string& command, const std::string& workdir = {}) {
    detail::TempFile out_file, err_file;

    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addopen(&actions, 0, "/dev/null", O_RDONLY, 0);
    posix_spawn_file_actions_addopen(&actions, 1, out_file.path().c_str(), O_WRONLY | O_TRUNC, 0644);
    posix_spawn_file_actions_addopen(&actions, 2, err_file.path().c_str(), O_WRONLY | O_TRUNC, 0644);

    std::string wrapped = command;
    if (!workdir.empty()) {
        // Single-quote the directory for the shell.
        std::string q = "'";
        for (char c : workdir) q += (c == '\'') ? std::string("'\\''") : std::string(1, c);
        q += "'";
        wrapped = "cd " + q + " && " + command;
    }
    const char* argv[] = {"/bin/sh", "-c", wrapped.c_str(), nullptr};

    auto start = std::chrono::steady_clock::now();
    pid_t pid{};
    int rc = posix_spawn(&pid, "/bin/sh", &actions, nullptr, const_cast<char* const*>(argv), environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0) throw SpawnError("posix_spawn failed for: " + command);

    int status = 0;
    while (::waitpid(pid, &status, 0) < 0) {
        if (errno != EINTR) throw SpawnError("waitpid failed");
    }
    auto stop = std::chrono::steady_clock::now();

    Result r;
    r.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count();
    if (WIFEXITED(status)) r.exit_code = WEXITSTATUS(status);
    else if (WIFSIGNALED(status)) r.exit_code = 128 + WTERMSIG(status);
    r.out = text::read_file(out_file.path());
    r.err = text::read_file(err_file.path());
    return r;
}

// Last n lines of a log, used for compiler feedback and error messages.
inline std::string tail_lines(const std::string& s, std::size_t n) {
    auto lines = text::split_lines(s);
    if (lines.size() > n) lines.erase(lines.begin(), lines.end() - static_cast<std::ptrdiff_t>(n));
    return text::join(lines, "\n");
}

// Exclusive advisory lock on a file, held for the lifetime of the object.
// Used to serialize runtime measurement host-wide and profiler output dirs.
class FileLock {
public:
    explicit FileLock(const std::string& path) {
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (fd_ < 0) throw IoError("cannot open lock file " + path);
        while (::flock(fd_, LOCK_EX) != 0) {
            if (errno != EINTR) {
                ::close(fd_);
                throw IoError("flock failed on " + path);
            }
        }
    }
    ~FileLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;

private:
    int fd_ = -1;
};

} // namespace optimas::process
