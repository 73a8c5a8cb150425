#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <unistd.h>

#include "periopt/error.hpp"
#include "periopt/extcalc.hpp"
#include "periopt/optimizers.hpp"
#include "test_support.hpp"

namespace periopt {
namespace {

namespace fs = std::filesystem;

std::vector<std::string> server(std::vector<std::string> extra = {}) {
  std::vector<std::string> cmd{PERIOPT_LJ_SERVER};
  cmd.insert(cmd.end(), extra.begin(), extra.end());
  return cmd;
}

Structure sample(std::uint64_t seed, int natoms = 6) {
  std::mt19937_64 rng(seed);
  const auto table = SpeciesTable::defaults();
  const std::vector<Species> species{table.at("Ar"), table.at("Xa"), table.at("Xb")};
  const Lattice lattice = testing::random_lattice(rng, std::cbrt(40.0 * natoms), 0.15);
  return testing::scatter_separated(rng, lattice, natoms, species, 2.6);
}

TEST(Wire, RequestLayout) {
  Structure s;
  s.lattice = Lattice::cubic(10.0);
  s.add_atom(SpeciesTable::defaults().at("Ar"), Vec3(0.1, 0.2, 0.30000000000000004));
  const auto j = encode_request(7, s);
  EXPECT_EQ(j.dump(),
            R"({"id":7,"lattice":[10.0,0.0,0.0,0.0,10.0,0.0,0.0,0.0,10.0],"positions":[0.1,0.2,0.30000000000000004],)"
            R"("symbols":["Ar"]})");
  // Decimal text reproduces the double bit pattern.
  const double back = nlohmann::json::parse(j.dump())["positions"][2].get<double>();
  EXPECT_EQ(back, 0.30000000000000004);
}

TEST(Wire, ResponseValidation) {
  EXPECT_NO_THROW(decode_response(R"({"id":3,"energy":-1.5,"forces":[1,2,3]})", 3, 1));
  EXPECT_THROW(decode_response(R"({"id":4,"energy":-1.5,"forces":[1,2,3]})", 3, 1), ProtocolError);
  EXPECT_THROW(decode_response(R"({"id":3,"energy":-1.5,"forces":[1,2]})", 3, 1), ProtocolError);
  EXPECT_THROW(decode_response(R"({"id":3,"energy":1,"forces":[1,2,3],"error":"x"})", 3, 1), ProtocolError);
  EXPECT_THROW(decode_response("not json", 3, 1), ProtocolError);
  EXPECT_THROW(decode_response(R"({"energy":1,"forces":[1,2,3]})", 3, 1), ProtocolError);
  try {
    decode_response(R"({"id":3,"error":"boom"})", 3, 1);
    FAIL() << "expected CalculatorError";
  } catch (const ProtocolError&) {
    FAIL() << "server error must not be a protocol error";
  } catch (const CalculatorError& e) {
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
}

TEST(Bridge, HandshakeAndAgreementWithInProcessPotential) {
  BridgeCalculator remote(server());
  LennardJones local;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Structure s = sample(seed);
    const auto a = remote.evaluate(s);
    const auto b = local.evaluate(s);
    EXPECT_NEAR(a.energy, b.energy, 1e-12) << "seed " << seed;
    ASSERT_EQ(a.forces.size(), b.forces.size());
    for (std::size_t i = 0; i < a.forces.size(); ++i) EXPECT_LT((a.forces[i] - b.forces[i]).norm(), 1e-12);
  }
  EXPECT_EQ(remote.total_calls(), 20u);
}

TEST(Bridge, RequestResponseCountsMatch) {
  const fs::path log = fs::temp_directory_path() / ("periopt_bridge_" + std::to_string(::getpid()) + ".log");
  fs::remove(log);
  constexpr int kCalls = 13;
  {
    BridgeCalculator remote(server({"--log", log.string()}));
    for (int i = 0; i < kCalls; ++i) remote.evaluate(sample(100 + i, 4));
    EXPECT_EQ(remote.requests_sent(), static_cast<std::uint64_t>(kCalls));
    EXPECT_EQ(remote.responses_received(), static_cast<std::uint64_t>(kCalls));
  }
  std::ifstream in(log);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "requests 13 responses 13");
  fs::remove(log);
}

TEST(Bridge, SpawnFailure) {
  EXPECT_THROW(BridgeCalculator({"/nonexistent/periopt-no-such-server"}), CalculatorError);
  EXPECT_THROW(make_calculator("cmd:/nonexistent/periopt-no-such-server --flag"), CalculatorError);
  EXPECT_THROW(make_calculator("vasp"), Error);
}

TEST(Bridge, VersionMismatch) {
  try {
    BridgeCalculator remote(server({"--version", "2"}));
    FAIL() << "expected version mismatch";
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("version mismatch"), std::string::npos);
  }
}

TEST(Bridge, HandshakeTimeout) {
  EXPECT_THROW(BridgeCalculator(server({"--silent"}), std::chrono::milliseconds(200)), ProtocolError);
}

TEST(Bridge, WrongIdIsAProtocolError) {
  BridgeCalculator remote(server({"--wrong-id", "2"}));
  EXPECT_NO_THROW(remote.evaluate(sample(1)));
  EXPECT_THROW(remote.evaluate(sample(2)), ProtocolError);
  // The session cannot be trusted after an id mismatch.
  EXPECT_THROW(remote.evaluate(sample(3)), ProtocolError);
}

TEST(Bridge, ClosedStreamIsBrokenPipe) {
  BridgeCalculator remote(server({"--close-on", "2"}));
  EXPECT_NO_THROW(remote.evaluate(sample(1)));
  try {
    remote.evaluate(sample(2));
    FAIL() << "expected broken pipe";
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("broken pipe"), std::string::npos);
  }
  EXPECT_THROW(remote.evaluate(sample(3)), ProtocolError);
}

TEST(Bridge, ServerErrorPropagatesAndSessionSurvives) {
  BridgeCalculator remote(server({"--error-on", "1"}));
  try {
    remote.evaluate(sample(1));
    FAIL() << "expected server error";
  } catch (const ProtocolError&) {
    FAIL() << "server error must not be a protocol error";
  } catch (const CalculatorError& e) {
    EXPECT_NE(std::string(e.what()).find("requested failure"), std::string::npos);
  }
  EXPECT_NO_THROW(remote.evaluate(sample(2)));
}

TEST(Bridge, DrivesAnOptimizer) {
  auto remote = make_calculator(std::string("cmd:") + PERIOPT_LJ_SERVER);
  LennardJones local;
  const Structure s = sample(77, 5);
  const auto a = relax(s, Method::FIRE, *remote);
  const auto b = relax(s, Method::FIRE, local);
  EXPECT_EQ(a.success, b.success);
  EXPECT_EQ(a.steps, b.steps);
  EXPECT_EQ(a.energy_calls, b.energy_calls);
  EXPECT_EQ(remote->total_calls(), a.energy_calls);
}

TEST(SplitCommand, Quoting) {
  EXPECT_EQ(split_command(R"(python3 -m 'my server' --x "a b"  c)"),
            (std::vector<std::string>{"python3", "-m", "my server", "--x", "a b", "c"}));
  EXPECT_THROW(split_command("a 'b"), Error);
}

}  // namespace
}  // namespace periopt
