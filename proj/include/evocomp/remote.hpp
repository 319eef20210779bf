#pragma once

#include <chrono>
#include <csignal>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "evocomp/scorer.hpp"

extern char** environ;

namespace evocomp {

/// Client for an external scorer speaking newline-delimited JSON:
///   -> {"type":"init","dataset":path}                  <- {"type":"ready"}
///   -> {"type":"score","id":u64,"sample":id,"mask":[..]} <- {"type":"loss","id":u64,"loss":x}
///   -> {"type":"shutdown"}                              <- process exits 0
/// Errors arrive as {"type":"error","id":u64,"message":...}.
/// One connection is shared; concurrent callers are serialised per batch.
class RemoteScorer final : public Scorer {
public:
    using Clock = std::chrono::steady_clock;

    /// Launches `command` through /bin/sh with its stdin/stdout as the transport.
    static std::unique_ptr<RemoteScorer> spawn(const std::string& command, const std::string& dataset,
                                               std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
        std::signal(SIGPIPE, SIG_IGN);
        int to_child[2], from_child[2];
        if (pipe(to_child) != 0) throw Error(Errc::transport, "pipe: " + std::string(std::strerror(errno)));
        if (pipe(from_child) != 0) {
            close(to_child[0]);
            close(to_child[1]);
            throw Error(Errc::transport, "pipe: " + std::string(std::strerror(errno)));
        }
        posix_spawn_file_actions_t fa;
        posix_spawn_file_actions_init(&fa);
        posix_spawn_file_actions_adddup2(&fa, to_child[0], STDIN_FILENO);
        posix_spawn_file_actions_adddup2(&fa, from_child[1], STDOUT_FILENO);
        for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) posix_spawn_file_actions_addclose(&fa, fd);
        std::string sh = "/bin/sh", dash_c = "-c", cmd = command;
        char* argv[] = {sh.data(), dash_c.data(), cmd.data(), nullptr};
        pid_t pid = 0;
        const int rc = posix_spawn(&pid, "/bin/sh", &fa, nullptr, argv, environ);
        posix_spawn_file_actions_destroy(&fa);
        close(to_child[0]);
        close(from_child[1]);
        if (rc != 0) {
            close(to_child[1]);
            close(from_child[0]);
            throw Error(Errc::transport, "cannot launch scorer: " + std::string(std::strerror(rc)));
        }
        std::unique_ptr<RemoteScorer> s(new RemoteScorer(from_child[0], to_child[1], pid, command, timeout));
        s->handshake(dataset);
        return s;
    }

    /// Connects to a scorer listening on "host:port".
    static std::unique_ptr<RemoteScorer> connect(const std::string& endpoint, const std::string& dataset,
                                                 std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
        std::signal(SIGPIPE, SIG_IGN);
        const auto colon = endpoint.rfind(':');
        if (colon == std::string::npos) throw Error(Errc::invalid_config, "endpoint must be host:port");
        const std::string host = endpoint.substr(0, colon), port = endpoint.substr(colon + 1);
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        if (const int rc = getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0)
            throw Error(Errc::transport, "resolve " + endpoint + ": " + gai_strerror(rc));
        int fd = -1;
        for (addrinfo* ai = res; ai; ai = ai->ai_next) {
            fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
            if (fd < 0) continue;
            if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
            close(fd);
            fd = -1;
        }
        freeaddrinfo(res);
        if (fd < 0) throw Error(Errc::transport, "cannot connect to " + endpoint);
        const int dup_fd = dup(fd);
        std::unique_ptr<RemoteScorer> s(new RemoteScorer(fd, dup_fd, -1, endpoint, timeout));
        s->handshake(dataset);
        return s;
    }

    RemoteScorer(const RemoteScorer&) = delete;
    RemoteScorer& operator=(const RemoteScorer&) = delete;

    ~RemoteScorer() override {
        try {
            shutdown();
        } catch (...) {
        }
    }

    std::string id() const override { return "remote:" + endpoint_; }

    double score(const Sample& sample, const GroupPartition& p, const Mask& mask) const override {
        return score_batch(sample, p, std::span<const Mask>(&mask, 1), 1).front();
    }

    /// Sends every request before reading; responses may arrive in any order
    /// and are matched by id.
    std::vector<double> score_batch(const Sample& sample, const GroupPartition&, std::span<const Mask> masks,
                                    std::size_t) const override {
        std::lock_guard lock(mu_);
        if (closed_) throw Error(Errc::transport, "scorer connection is closed");
        std::map<std::uint64_t, std::size_t> pending;
        const std::uint64_t first_id = next_id_;
        std::string out;
        for (std::size_t i = 0; i < masks.size(); ++i) {
            if (masks[i].bits.size() != sample.n()) throw Error(Errc::length_mismatch, "mask length vs n");
            const std::uint64_t rid = next_id_++;
            pending[rid] = i;
            nlohmann::json mask = nlohmann::json::array();
            for (auto b : masks[i].bits) mask.push_back(static_cast<int>(b));
            out += nlohmann::json{{"type", "score"}, {"id", rid}, {"sample", sample.id}, {"mask", mask}}.dump() + "\n";
        }
        std::vector<double> losses(masks.size());
        const auto deadline = Clock::now() + timeout_;
        std::size_t written = 0;
        while (!pending.empty()) {
            const std::string line = exchange(out, written, deadline);
            const auto msg = parse(line);
            const std::string type = msg.value("type", "");
            if (!msg.contains("id") || !msg["id"].is_number_unsigned())
                throw Error(type == "error" ? Errc::remote_error : Errc::malformed_response,
                            "response without a valid id: " + line);
            const auto rid = msg["id"].get<std::uint64_t>();
            // Late replies to an earlier, aborted batch are dropped.
            if (rid < first_id) continue;
            const auto it = pending.find(rid);
            if (it == pending.end()) throw Error(Errc::protocol, "response for unknown id " + std::to_string(rid));
            if (type == "error")
                throw Error(Errc::remote_error, "candidate " + std::to_string(it->second) + ": " +
                                                    msg.value("message", std::string("unspecified")));
            if (type != "loss" || !msg.contains("loss") || !msg["loss"].is_number())
                throw Error(Errc::malformed_response, "unexpected response: " + line);
            losses[it->second] = msg["loss"].get<double>();
            pending.erase(it);
        }
        return losses;
    }

    /// Sends shutdown and reaps the child; returns its exit status (or -1 for sockets).
    int shutdown() {
        std::lock_guard lock(mu_);
        if (closed_) return exit_status_;
        closed_ = true;
        const std::string msg = R"({"type":"shutdown"})" "\n";
        std::size_t written = 0;
        while (written < msg.size()) {
            const ssize_t w = ::write(out_fd_, msg.data() + written, msg.size() - written);
            if (w <= 0) break;
            written += static_cast<std::size_t>(w);
        }
        close(out_fd_);
        if (pid_ > 0) {
            const auto deadline = Clock::now() + std::chrono::seconds(5);
            int status = 0;
            for (;;) {
                const pid_t r = waitpid(pid_, &status, WNOHANG);
                if (r == pid_) break;
                if (r < 0) {
                    status = -1;
                    break;
                }
                if (Clock::now() > deadline) {
                    kill(pid_, SIGKILL);
                    waitpid(pid_, &status, 0);
                    break;
                }
                usleep(1000);
            }
            exit_status_ = (status >= 0 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
        }
        close(in_fd_);
        return exit_status_;
    }

private:
    RemoteScorer(int in_fd, int out_fd, pid_t pid, std::string endpoint, std::chrono::milliseconds timeout)
        : in_fd_(in_fd), out_fd_(out_fd), pid_(pid), endpoint_(std::move(endpoint)), timeout_(timeout) {
        fcntl(out_fd_, F_SETFL, fcntl(out_fd_, F_GETFL) | O_NONBLOCK);
    }

    void handshake(const std::string& dataset) {
        std::lock_guard lock(mu_);
        std::string out = nlohmann::json{{"type", "init"}, {"dataset", dataset}}.dump() + "\n";
        std::size_t written = 0;
        const auto msg = parse(exchange(out, written, Clock::now() + timeout_));
        if (msg.value("type", "") == "error")
            throw Error(Errc::remote_error, "init rejected: " + msg.value("message", std::string("unspecified")));
        if (msg.value("type", "") != "ready") throw Error(Errc::protocol, "expected ready, got " + msg.dump());
    }

    static nlohmann::json parse(const std::string& line) {
        try {
            auto j = nlohmann::json::parse(line);
            if (!j.is_object()) throw Error(Errc::malformed_response, "not a JSON object: " + line);
            return j;
        } catch (const nlohmann::json::exception&) {
            throw Error(Errc::malformed_response, "unparseable response: " + line);
        }
    }

    /// Writes the unsent tail of `out` while waiting for the next complete line.
    std::string exchange(const std::string& out, std::size_t& written, Clock::time_point deadline) const {
        for (;;) {
            if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                if (!line.empty() && line.back() == '\r') line.pop_back();
                if (line.empty()) continue;
                return line;
            }
            const auto now = Clock::now();
            if (now >= deadline) throw Error(Errc::timeout, "no response from " + endpoint_ + " within deadline");
            const int wait_ms = static_cast<int>(
                std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count() + 1);
            pollfd fds[2] = {{in_fd_, POLLIN, 0}, {out_fd_, POLLOUT, 0}};
            const nfds_t nfds = written < out.size() ? 2 : 1;
            const int rc = ::poll(fds, nfds, wait_ms);
            if (rc < 0) {
                if (errno == EINTR) continue;
                throw Error(Errc::transport, "poll: " + std::string(std::strerror(errno)));
            }
            if (nfds == 2 && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
                const ssize_t w = ::write(out_fd_, out.data() + written, out.size() - written);
                if (w < 0 && errno != EAGAIN && errno != EWOULDBLOCK)
                    throw Error(Errc::transport, "write to scorer failed: " + std::string(std::strerror(errno)));
                if (w > 0) written += static_cast<std::size_t>(w);
            }
            if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
                char chunk[4096];
                const ssize_t r = ::read(in_fd_, chunk, sizeof chunk);
                if (r == 0) throw Error(Errc::transport, "scorer closed the connection");
                if (r < 0) {
                    if (errno == EINTR || errno == EAGAIN) continue;
                    throw Error(Errc::transport, "read from scorer failed: " + std::string(std::strerror(errno)));
                }
                buffer_.append(chunk, static_cast<std::size_t>(r));
            }
        }
    }

    int in_fd_;
    int out_fd_;
    pid_t pid_;
    std::string endpoint_;
    std::chrono::milliseconds timeout_;
    mutable std::mutex mu_;
    mutable std::string buffer_;
    mutable std::uint64_t next_id_ = 1;
    bool closed_ = false;
    int exit_status_ = -1;
};

}  // namespace evocomp
