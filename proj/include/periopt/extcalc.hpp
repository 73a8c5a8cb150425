#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "periopt/potential.hpp"

namespace periopt {

inline constexpr std::string_view kProtocolName = "periopt-calc";
inline constexpr int kProtocolVersion = 1;

/// Request line for one evaluation. Serialization keeps full double precision.
nlohmann::json encode_request(std::uint64_t id, const Structure& s);

/// Decodes a response line. Throws ProtocolError on malformed lines or id
/// mismatch and CalculatorError when the server reports an error.
CalcResult decode_response(const std::string& line, std::uint64_t expected_id, std::size_t natoms);

/// Calculator served by a child process over newline-delimited JSON on its
/// stdin/stdout. One request is in flight at a time.
class BridgeCalculator final : public Calculator {
 public:
  /// Spawns `command` and waits for the handshake line. Throws CalculatorError
  /// on spawn failure, ProtocolError on timeout or version mismatch.
  explicit BridgeCalculator(std::vector<std::string> command,
                            std::chrono::milliseconds handshake_timeout = std::chrono::seconds(30));
  ~BridgeCalculator() override;

  BridgeCalculator(const BridgeCalculator&) = delete;
  BridgeCalculator& operator=(const BridgeCalculator&) = delete;

  std::uint64_t requests_sent() const { return next_id_ - 1; }
  std::uint64_t responses_received() const { return responses_; }
  int pid() const { return pid_; }

 protected:
  CalcResult compute(const Structure& s) override;

 private:
  void write_line(const std::string& line);
  std::string read_line(int timeout_ms);
  void shutdown_child();

  int pid_ = -1;
  int fd_ = -1;
  std::string buffer_;
  std::uint64_t next_id_ = 1;
  std::uint64_t responses_ = 0;
  bool broken_ = false;
};

/// "lj" for the built-in potential or "cmd:<command line>" for an external server.
std::unique_ptr<Calculator> make_calculator(const std::string& spec);

/// Whitespace split honoring single and double quotes.
std::vector<std::string> split_command(std::string_view command);

}  // namespace periopt
