#pragma once

#include <string>
#include <sys/types.h>

#include "oodkit/adversarial.hpp"
#include "oodkit/wire.hpp"

namespace oodkit {

/// Encoder served by a subprocess speaking the bridge wire protocol on its
/// stdin/stdout. The command runs under /bin/sh -c; stderr is inherited.
/// Any transport or server-side failure surfaces as ErrorCode::BridgeFailure.
class BridgeEncoder final : public Encoder {
public:
    explicit BridgeEncoder(const std::string& command);
    ~BridgeEncoder() override;

    BridgeEncoder(const BridgeEncoder&) = delete;
    BridgeEncoder& operator=(const BridgeEncoder&) = delete;

    std::vector<double> encode(const ImageShape& shape, std::span<const double> pixels) override;
    SimilarityGradient grad_similarity(const ImageShape& shape, std::span<const double> pixels,
                                       std::span<const double> target) override;

private:
    wire::Response roundtrip(const wire::Request& req, std::size_t n_pixels);
    [[noreturn]] void fail_transport(const std::string& what);
    void shutdown();

    std::string command_;
    int fd_ = -1;
    pid_t child_ = -1;
};

}  // namespace oodkit
