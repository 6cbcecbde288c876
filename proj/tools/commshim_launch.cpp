// commshim-launch: start a benchmark as N ranks.
//
//   commshim-launch --np N --transport {sim|socket} [--hostfile F] -- prog args...
//
// sim runs `prog` once with every rank simulated in-process. socket forks N
// local processes, one per rank, each told its rank through the
// environment. Without --hostfile a loopback hostfile with free ports is
// generated. The first failing rank's status becomes the launcher's and the
// remaining ranks are terminated.

#include "commshim/socket_transport.hpp"

#include <CLI11.hpp>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <thread>

using namespace commshim;

namespace {

std::uint16_t free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) fail(ErrorCode::io, "socket() failed");
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  a.sin_port = 0;
  socklen_t len = sizeof a;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&a), sizeof a) != 0 ||
      ::getsockname(fd, reinterpret_cast<sockaddr*>(&a), &len) != 0) {
    ::close(fd);
    fail(ErrorCode::io, "could not reserve a loopback port");
  }
  ::close(fd);
  return ntohs(a.sin_port);
}

std::vector<char*> argv_of(std::vector<std::string>& args) {
  std::vector<char*> out;
  for (auto& a : args) out.push_back(a.data());
  out.push_back(nullptr);
  return out;
}

int status_code(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return 1;
}

int run_sim(std::uint32_t np, std::vector<std::string> command) {
  ::setenv("COMMSHIM_WORLD_SIZE", std::to_string(np).c_str(), 1);
  ::setenv("COMMSHIM_TRANSPORT", "sim", 1);
  ::unsetenv("COMMSHIM_RANK");
  ::unsetenv("COMMSHIM_HOSTFILE");
  auto argv = argv_of(command);
  ::execvp(argv[0], argv.data());
  std::cerr << "commshim-launch: cannot run '" << command[0] << "'\n";
  return 127;
}

int run_socket(std::uint32_t np, std::string hostfile, std::vector<std::string> command, double timeout_s) {
  std::filesystem::path generated;
  if (hostfile.empty()) {
    std::vector<HostEntry> hosts;
    for (std::uint32_t r = 0; r < np; ++r) hosts.push_back({RankId{r}, "127.0.0.1", free_port()});
    generated = std::filesystem::temp_directory_path() / ("commshim-hosts-" + std::to_string(::getpid()));
    write_hostfile(generated.string(), hosts);
    hostfile = generated.string();
  } else {
    const auto hosts = load_hostfile(hostfile);
    if (hosts.size() != np) {
      fail(ErrorCode::usage, "hostfile '" + hostfile + "' lists " + std::to_string(hosts.size()) + " ranks, --np is " +
                                 std::to_string(np));
    }
  }

  std::map<pid_t, std::uint32_t> children;
  for (std::uint32_t r = 0; r < np; ++r) {
    const pid_t pid = ::fork();
    if (pid < 0) fail(ErrorCode::io, "fork failed");
    if (pid == 0) {
      ::setenv("COMMSHIM_RANK", std::to_string(r).c_str(), 1);
      ::setenv("COMMSHIM_WORLD_SIZE", std::to_string(np).c_str(), 1);
      ::setenv("COMMSHIM_HOSTFILE", hostfile.c_str(), 1);
      ::setenv("COMMSHIM_TRANSPORT", "socket", 1);
      auto argv = argv_of(command);
      ::execvp(argv[0], argv.data());
      std::cerr << "commshim-launch: rank " << r << " cannot run '" << command[0] << "'\n";
      ::_exit(127);
    }
    children[pid] = r;
  }

  int result = 0;
  bool failed = false;
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
  auto terminate_rest = [&] {
    for (auto& [pid, rank] : children) ::kill(pid, SIGTERM);
  };
  while (!children.empty()) {
    int status = 0;
    const pid_t pid = ::waitpid(-1, &status, WNOHANG);
    if (pid == 0) {
      if (timeout_s > 0 && std::chrono::steady_clock::now() > deadline && !failed) {
        std::cerr << "commshim-launch: timed out after " << timeout_s << " s\n";
        failed = true;
        result = 1;
        terminate_rest();
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
      continue;
    }
    if (pid < 0) break;
    const auto it = children.find(pid);
    if (it == children.end()) continue;
    const std::uint32_t rank = it->second;
    children.erase(it);
    const int code = status_code(status);
    if (code != 0 && !failed) {
      failed = true;
      result = code;
      if (WIFSIGNALED(status)) std::cerr << "commshim-launch: rank " << rank << " killed by signal " << WTERMSIG(status) << '\n';
      terminate_rest();
    }
  }
  if (!generated.empty()) std::filesystem::remove(generated);
  return result;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"commshim-launch: run a benchmark as N ranks"};
  std::uint32_t np = 2;
  std::string transport = "sim";
  std::string hostfile;
  double timeout_s = 0;
  std::vector<std::string> command;
  app.add_option("--np", np, "number of ranks")->required()->check(CLI::Range(1u, 65536u));
  app.add_option("--transport", transport, "sim or socket")->check(CLI::IsMember({"sim", "socket"}));
  app.add_option("--hostfile", hostfile, "rank host port lines (socket)");
  app.add_option("--timeout", timeout_s, "seconds before all ranks are terminated (socket; 0 = none)");
  app.add_option("command", command, "program and arguments, after --")->required();
  app.positionals_at_end();
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    if (transport == "sim") return run_sim(np, command);
    return run_socket(np, hostfile, command, timeout_s);
  } catch (const Error& e) {
    std::cerr << "commshim-launch: " << e.what() << '\n';
    return e.code() == ErrorCode::usage || e.code() == ErrorCode::config ? 2 : 1;
  }
}
