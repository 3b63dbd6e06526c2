#pragma once

// Encoder bridge wire protocol (little-endian, self-delimiting messages).
//
// Request:
//   u8 opcode (1 = ENCODE, 2 = GRAD_SIM), u32 H, u32 W, f32[3·H·W] pixels (CHW)
//   GRAD_SIM appends: u32 D, f32[D] target feature
// Response (first byte echoes the request opcode, or 255 on error):
//   ENCODE:   u8 1, u32 D, f32[D] feature
//   GRAD_SIM: u8 2, f32 similarity, f32[3·H·W] gradient of −cos w.r.t. pixels
//   error:    u8 255, u32 length, UTF-8 message

#include <cstdint>
#include <string>
#include <vector>

#include "oodkit/error.hpp"

namespace oodkit {
class Encoder;
}

namespace oodkit::wire {

enum class Opcode : std::uint8_t { Encode = 1, GradSim = 2, Error = 255 };

/// Largest pixel or feature count accepted from the peer.
inline constexpr std::uint64_t kMaxValues = std::uint64_t(1) << 28;

struct Request {
    Opcode op = Opcode::Encode;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<float> pixels;
    std::vector<float> target;  // GRAD_SIM only
};

struct Response {
    Opcode op = Opcode::Encode;
    std::vector<float> feature;   // ENCODE
    float similarity = 0.0f;      // GRAD_SIM
    std::vector<float> gradient;  // GRAD_SIM
    std::string message;          // error
};

/// Blocking byte stream over a file descriptor.
class FdStream {
public:
    FdStream(int read_fd, int write_fd) : read_fd_(read_fd), write_fd_(write_fd) {}

    /// False on clean EOF before the first byte; throws BridgeFailure on a partial read.
    bool read_exact(void* dst, std::size_t n);
    void write_all(const void* src, std::size_t n);

private:
    int read_fd_;
    int write_fd_;
};

std::vector<std::uint8_t> encode_request(const Request& req);
std::vector<std::uint8_t> encode_response(const Response& resp);

/// Reads one response; `n_pixels` sizes the GRAD_SIM gradient.
Response read_response(FdStream& stream, std::size_t n_pixels);

/// Outcome of reading one request on the server side.
struct Incoming {
    enum class Status { Ok, Eof, BadOpcode } status = Status::Ok;
    Request request;
    std::uint8_t raw_opcode = 0;
};
Incoming read_request(FdStream& stream);

/// Answers requests with `encoder` until the peer closes the stream. Unknown
/// opcodes and encoder errors produce an error response; the loop continues.
void serve(FdStream& stream, Encoder& encoder);

}  // namespace oodkit::wire
