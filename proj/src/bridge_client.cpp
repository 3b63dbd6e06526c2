#include "oodkit/bridge_client.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>

#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

namespace oodkit {
namespace {

wire::Request make_request(wire::Opcode op, const ImageShape& shape, std::span<const double> pixels) {
    require(shape.channels == 3 && pixels.size() == shape.size(), ErrorCode::DimensionMismatch,
            "bridge images must be 3xHxW");
    wire::Request req;
    req.op = op;
    req.height = static_cast<std::uint32_t>(shape.height);
    req.width = static_cast<std::uint32_t>(shape.width);
    req.pixels.assign(pixels.begin(), pixels.end());
    return req;
}

std::string describe_status(int status) {
    if (WIFEXITED(status)) return "exited with status " + std::to_string(WEXITSTATUS(status));
    if (WIFSIGNALED(status)) return "killed by signal " + std::to_string(WTERMSIG(status));
    return "stopped";
}

}  // namespace

BridgeEncoder::BridgeEncoder(const std::string& command) : command_(command) {
    require(!command.empty(), ErrorCode::ContractViolation, "empty bridge command");
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) != 0) {
        fail(ErrorCode::BridgeFailure, std::string("socketpair: ") + std::strerror(errno));
    }
    const pid_t pid = ::fork();
    if (pid < 0) {
        ::close(sv[0]);
        ::close(sv[1]);
        fail(ErrorCode::BridgeFailure, std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
        ::close(sv[0]);
        ::dup2(sv[1], STDIN_FILENO);
        ::dup2(sv[1], STDOUT_FILENO);
        if (sv[1] > STDOUT_FILENO) ::close(sv[1]);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(sv[1]);
    fd_ = sv[0];
    child_ = pid;
}

BridgeEncoder::~BridgeEncoder() { shutdown(); }

void BridgeEncoder::shutdown() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
    if (child_ > 0) {
        int status = 0;
        ::waitpid(child_, &status, 0);
        child_ = -1;
    }
}

void BridgeEncoder::fail_transport(const std::string& what) {
    std::string msg = "bridge '" + command_ + "': " + what;
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
    if (child_ > 0) {
        int status = 0;
        if (::waitpid(child_, &status, WNOHANG) == child_) {
            msg += " (process " + describe_status(status) + ")";
        } else {
            ::kill(child_, SIGTERM);
            ::waitpid(child_, &status, 0);
        }
        child_ = -1;
    }
    fail(ErrorCode::BridgeFailure, msg);
}

wire::Response BridgeEncoder::roundtrip(const wire::Request& req, std::size_t n_pixels) {
    if (fd_ < 0) fail(ErrorCode::BridgeFailure, "bridge '" + command_ + "' is no longer running");
    wire::Response resp;
    try {
        wire::FdStream stream(fd_, fd_);
        const auto bytes = wire::encode_request(req);
        stream.write_all(bytes.data(), bytes.size());
        resp = wire::read_response(stream, n_pixels);
    } catch (const Error& e) {
        fail_transport(e.what());
    }
    if (resp.op == wire::Opcode::Error) {
        fail(ErrorCode::BridgeFailure, "bridge '" + command_ + "' reported: " + resp.message);
    }
    if (resp.op != req.op) fail_transport("response opcode does not match request");
    return resp;
}

std::vector<double> BridgeEncoder::encode(const ImageShape& shape, std::span<const double> pixels) {
    const auto resp = roundtrip(make_request(wire::Opcode::Encode, shape, pixels), pixels.size());
    return {resp.feature.begin(), resp.feature.end()};
}

SimilarityGradient BridgeEncoder::grad_similarity(const ImageShape& shape, std::span<const double> pixels,
                                                  std::span<const double> target) {
    auto req = make_request(wire::Opcode::GradSim, shape, pixels);
    req.target.assign(target.begin(), target.end());
    const auto resp = roundtrip(req, pixels.size());
    SimilarityGradient out;
    out.similarity = resp.similarity;
    out.gradient.assign(resp.gradient.begin(), resp.gradient.end());
    return out;
}

}  // namespace oodkit
