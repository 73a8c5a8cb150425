#include "periopt/extcalc.hpp"

#include <cerrno>
#include <cstring>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include "periopt/error.hpp"

namespace periopt {

using nlohmann::json;

json encode_request(std::uint64_t id, const Structure& s) {
  json lattice = json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) lattice.push_back(s.lattice.matrix()(r, c));
  }
  json symbols = json::array();
  json positions = json::array();
  for (std::size_t i = 0; i < s.size(); ++i) {
    symbols.push_back(s.symbol(i));
    for (int a = 0; a < 3; ++a) positions.push_back(s.positions[i][a]);
  }
  return json{{"id", id}, {"lattice", lattice}, {"symbols", symbols}, {"positions", positions}};
}

CalcResult decode_response(const std::string& line, std::uint64_t expected_id, std::size_t natoms) {
  json msg;
  try {
    msg = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ProtocolError(std::string("malformed response: ") + e.what());
  }
  if (!msg.is_object() || !msg.contains("id") || !msg["id"].is_number_integer()) {
    throw ProtocolError("response lacks integer id");
  }
  if (msg["id"].get<std::int64_t>() != static_cast<std::int64_t>(expected_id)) {
    throw ProtocolError("response id " + msg["id"].dump() + " does not match request id " +
                        std::to_string(expected_id));
  }
  const bool has_error = msg.contains("error");
  const bool has_result = msg.contains("energy") || msg.contains("forces");
  if (has_error == has_result) throw ProtocolError("response must carry either error or energy+forces");
  if (has_error) throw CalculatorError("calculator server error: " + msg["error"].get<std::string>());
  if (!msg.contains("energy") || !msg["energy"].is_number() || !msg.contains("forces") ||
      !msg["forces"].is_array()) {
    throw ProtocolError("response needs numeric energy and forces array");
  }
  const auto& forces = msg["forces"];
  if (forces.size() != 3 * natoms) {
    throw ProtocolError("forces array has " + std::to_string(forces.size()) + " entries, expected " +
                        std::to_string(3 * natoms));
  }
  CalcResult out;
  out.energy = msg["energy"].get<double>();
  out.forces.resize(natoms);
  for (std::size_t i = 0; i < natoms; ++i) {
    for (int a = 0; a < 3; ++a) {
      const auto& v = forces[3 * i + static_cast<std::size_t>(a)];
      if (!v.is_number()) throw ProtocolError("non-numeric force component");
      out.forces[i][a] = v.get<double>();
    }
  }
  return out;
}

BridgeCalculator::BridgeCalculator(std::vector<std::string> command, std::chrono::milliseconds handshake_timeout) {
  if (command.empty()) throw CalculatorError("empty calculator command");
  int sv[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) {
    throw CalculatorError(std::string("socketpair failed: ") + std::strerror(errno));
  }
  int errpipe[2];
  if (::pipe2(errpipe, O_CLOEXEC) != 0) {
    ::close(sv[0]);
    ::close(sv[1]);
    throw CalculatorError(std::string("pipe failed: ") + std::strerror(errno));
  }
  std::vector<char*> argv;
  for (auto& arg : command) argv.push_back(arg.data());
  argv.push_back(nullptr);

  const pid_t pid = ::fork();
  if (pid < 0) {
    ::close(sv[0]);
    ::close(sv[1]);
    ::close(errpipe[0]);
    ::close(errpipe[1]);
    throw CalculatorError(std::string("fork failed: ") + std::strerror(errno));
  }
  if (pid == 0) {
    ::dup2(sv[1], STDIN_FILENO);
    ::dup2(sv[1], STDOUT_FILENO);
    ::execvp(argv[0], argv.data());
    const int err = errno;
    [[maybe_unused]] auto n = ::write(errpipe[1], &err, sizeof(err));
    ::_exit(127);
  }
  ::close(sv[1]);
  ::close(errpipe[1]);
  pid_ = pid;
  fd_ = sv[0];

  int child_errno = 0;
  ssize_t got;
  do {
    got = ::read(errpipe[0], &child_errno, sizeof(child_errno));
  } while (got < 0 && errno == EINTR);
  ::close(errpipe[0]);
  if (got > 0) {
    shutdown_child();
    throw CalculatorError("cannot spawn calculator `" + command[0] + "`: " + std::strerror(child_errno));
  }

  std::string hello;
  try {
    hello = read_line(static_cast<int>(handshake_timeout.count()));
  } catch (const ProtocolError&) {
    shutdown_child();
    throw;
  }
  json msg;
  try {
    msg = json::parse(hello);
  } catch (const json::parse_error&) {
    shutdown_child();
    throw ProtocolError("malformed handshake: " + hello);
  }
  if (!msg.is_object() || msg.value("protocol", std::string()) != kProtocolName) {
    shutdown_child();
    throw ProtocolError("unexpected handshake: " + hello);
  }
  if (!msg.contains("version") || !msg["version"].is_number_integer() ||
      msg["version"].get<int>() != kProtocolVersion) {
    shutdown_child();
    throw ProtocolError("protocol version mismatch: server says " + msg.value("version", json()).dump() +
                        ", client speaks " + std::to_string(kProtocolVersion));
  }
}

BridgeCalculator::~BridgeCalculator() { shutdown_child(); }

void BridgeCalculator::shutdown_child() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_WR);
  }
  if (pid_ > 0) {
    int status = 0;
    pid_t done = 0;
    for (int i = 0; i < 100; ++i) {
      done = ::waitpid(pid_, &status, WNOHANG);
      if (done != 0) break;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    if (done == 0) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
    }
    pid_ = -1;
  }
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void BridgeCalculator::write_line(const std::string& line) {
  std::string data = line + "\n";
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      broken_ = true;
      throw ProtocolError(std::string("broken pipe writing to calculator: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

std::string BridgeCalculator::read_line(int timeout_ms) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  for (;;) {
    if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    int wait = -1;
    if (timeout_ms >= 0) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw ProtocolError("timed out waiting for calculator");
      wait = static_cast<int>(left.count());
    }
    pollfd pfd{fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, wait);
    if (ready < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("poll failed: ") + std::strerror(errno));
    }
    if (ready == 0) continue;
    char chunk[65536];
    const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
    if (n < 0) {
      if (errno == EINTR) continue;
      broken_ = true;
      throw ProtocolError(std::string("broken pipe reading from calculator: ") + std::strerror(errno));
    }
    if (n == 0) {
      broken_ = true;
      throw ProtocolError("broken pipe: calculator closed its stream");
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

CalcResult BridgeCalculator::compute(const Structure& s) {
  if (broken_) throw ProtocolError("broken pipe: calculator connection is closed");
  s.validate();
  const std::uint64_t id = next_id_++;
  write_line(encode_request(id, s).dump());
  const std::string line = read_line(-1);
  ++responses_;
  try {
    return decode_response(line, id, s.size());
  } catch (const ProtocolError&) {
    broken_ = true;
    throw;
  }
}

std::vector<std::string> split_command(std::string_view command) {
  std::vector<std::string> out;
  std::string cur;
  bool in_token = false;
  char quote = 0;
  for (char c : command) {
    if (quote) {
      if (c == quote) {
        quote = 0;
      } else {
        cur.push_back(c);
      }
    } else if (c == '\'' || c == '"') {
      quote = c;
      in_token = true;
    } else if (c == ' ' || c == '\t') {
      if (in_token) {
        out.push_back(cur);
        cur.clear();
        in_token = false;
      }
    } else {
      cur.push_back(c);
      in_token = true;
    }
  }
  if (quote) throw Error("unterminated quote in command: " + std::string(command));
  if (in_token) out.push_back(cur);
  return out;
}

std::unique_ptr<Calculator> make_calculator(const std::string& spec) {
  if (spec == "lj") return std::make_unique<LennardJones>();
  if (spec.rfind("cmd:", 0) == 0) return std::make_unique<BridgeCalculator>(split_command(spec.substr(4)));
  throw Error("unknown calculator `" + spec + "` (expected lj or cmd:<command>)");
}

}  // namespace periopt
