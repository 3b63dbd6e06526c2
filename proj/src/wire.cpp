#include "oodkit/wire.hpp"

#include <bit>
#include <cerrno>
#include <cstring>

#include <sys/socket.h>
#include <unistd.h>

#include "oodkit/adversarial.hpp"

namespace oodkit::wire {
namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out.push_back(std::uint8_t(v >> s));
}
void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
void put_f32s(std::vector<std::uint8_t>& out, const std::vector<float>& v) {
    for (float x : v) put_f32(out, x);
}

[[noreturn]] void eof() { fail(ErrorCode::BridgeFailure, "bridge stream closed by peer"); }

std::uint8_t get_u8(FdStream& s) {
    std::uint8_t v;
    if (!s.read_exact(&v, 1)) eof();
    return v;
}
std::uint32_t get_u32(FdStream& s) {
    std::uint8_t b[4];
    if (!s.read_exact(b, 4)) eof();
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}
std::vector<float> get_f32s(FdStream& s, std::uint64_t n) {
    require(n <= kMaxValues, ErrorCode::BridgeFailure, "bridge message too large");
    std::vector<std::uint8_t> bytes(n * 4);
    if (n && !s.read_exact(bytes.data(), bytes.size())) eof();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* b = bytes.data() + 4 * i;
        out[i] = std::bit_cast<float>(std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
                                      std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24);
    }
    return out;
}

}  // namespace

bool FdStream::read_exact(void* dst, std::size_t n) {
    auto* p = static_cast<std::uint8_t*>(dst);
    std::size_t got = 0;
    while (got < n) {
        const ssize_t r = ::read(read_fd_, p + got, n - got);
        if (r < 0 && errno == EINTR) continue;
        if (r < 0) fail(ErrorCode::BridgeFailure, std::string("bridge read: ") + std::strerror(errno));
        if (r == 0) {
            if (got == 0) return false;
            fail(ErrorCode::BridgeFailure, "bridge stream closed mid-message");
        }
        got += std::size_t(r);
    }
    return true;
}

void FdStream::write_all(const void* src, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(src);
    std::size_t sent = 0;
    while (sent < n) {
        // send() on sockets avoids SIGPIPE; plain write() for pipes and files.
        ssize_t r = ::send(write_fd_, p + sent, n - sent, MSG_NOSIGNAL);
        if (r < 0 && errno == ENOTSOCK) r = ::write(write_fd_, p + sent, n - sent);
        if (r < 0 && errno == EINTR) continue;
        if (r < 0) fail(ErrorCode::BridgeFailure, std::string("bridge write: ") + std::strerror(errno));
        sent += std::size_t(r);
    }
}

std::vector<std::uint8_t> encode_request(const Request& req) {
    std::vector<std::uint8_t> out;
    out.reserve(9 + 4 * (req.pixels.size() + req.target.size() + 1));
    put_u8(out, static_cast<std::uint8_t>(req.op));
    put_u32(out, req.height);
    put_u32(out, req.width);
    put_f32s(out, req.pixels);
    if (req.op == Opcode::GradSim) {
        put_u32(out, static_cast<std::uint32_t>(req.target.size()));
        put_f32s(out, req.target);
    }
    return out;
}

std::vector<std::uint8_t> encode_response(const Response& resp) {
    std::vector<std::uint8_t> out;
    put_u8(out, static_cast<std::uint8_t>(resp.op));
    switch (resp.op) {
        case Opcode::Encode:
            put_u32(out, static_cast<std::uint32_t>(resp.feature.size()));
            put_f32s(out, resp.feature);
            break;
        case Opcode::GradSim:
            put_f32(out, resp.similarity);
            put_f32s(out, resp.gradient);
            break;
        case Opcode::Error:
            put_u32(out, static_cast<std::uint32_t>(resp.message.size()));
            out.insert(out.end(), resp.message.begin(), resp.message.end());
            break;
    }
    return out;
}

Response read_response(FdStream& stream, std::size_t n_pixels) {
    Response resp;
    const std::uint8_t op = get_u8(stream);
    switch (op) {
        case 1:
            resp.op = Opcode::Encode;
            resp.feature = get_f32s(stream, get_u32(stream));
            break;
        case 2: {
            resp.op = Opcode::GradSim;
            const auto sim = get_f32s(stream, 1);
            resp.similarity = sim[0];
            resp.gradient = get_f32s(stream, n_pixels);
            break;
        }
        case 255: {
            resp.op = Opcode::Error;
            const std::uint32_t len = get_u32(stream);
            require(len <= kMaxValues, ErrorCode::BridgeFailure, "bridge error message too large");
            resp.message.resize(len);
            if (len && !stream.read_exact(resp.message.data(), len)) eof();
            break;
        }
        default:
            fail(ErrorCode::BridgeFailure, "bridge sent unknown response opcode " + std::to_string(op));
    }
    return resp;
}

Incoming read_request(FdStream& stream) {
    Incoming in;
    std::uint8_t op = 0;
    if (!stream.read_exact(&op, 1)) {
        in.status = Incoming::Status::Eof;
        return in;
    }
    in.raw_opcode = op;
    if (op != 1 && op != 2) {
        in.status = Incoming::Status::BadOpcode;
        return in;
    }
    Request& req = in.request;
    req.op = static_cast<Opcode>(op);
    req.height = get_u32(stream);
    req.width = get_u32(stream);
    req.pixels = get_f32s(stream, std::uint64_t(3) * req.height * req.width);
    if (req.op == Opcode::GradSim) req.target = get_f32s(stream, get_u32(stream));
    return in;
}

void serve(FdStream& stream, Encoder& encoder) {
    auto send = [&](const Response& r) {
        const auto bytes = encode_response(r);
        stream.write_all(bytes.data(), bytes.size());
    };
    for (;;) {
        Incoming in;
        try {
            in = read_request(stream);
        } catch (const Error& e) {
            send({Opcode::Error, {}, 0.0f, {}, e.what()});
            return;  // framing is lost once a message is cut short or oversized
        }
        if (in.status == Incoming::Status::Eof) return;
        if (in.status == Incoming::Status::BadOpcode) {
            send({Opcode::Error, {}, 0.0f, {}, "unknown opcode " + std::to_string(in.raw_opcode)});
            continue;
        }
        const Request& req = in.request;
        const ImageShape shape{3, req.height, req.width};
        const std::vector<double> px(req.pixels.begin(), req.pixels.end());
        try {
            Response resp;
            resp.op = req.op;
            if (req.op == Opcode::Encode) {
                const auto f = encoder.encode(shape, px);
                resp.feature.assign(f.begin(), f.end());
            } else {
                const std::vector<double> target(req.target.begin(), req.target.end());
                const auto sg = encoder.grad_similarity(shape, px, target);
                resp.similarity = float(sg.similarity);
                resp.gradient.assign(sg.gradient.begin(), sg.gradient.end());
            }
            send(resp);
        } catch (const std::exception& e) {
            send({Opcode::Error, {}, 0.0f, {}, e.what()});
        }
    }
}

}  // namespace oodkit::wire
