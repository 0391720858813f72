// Loopback exercise of the live relay: non-QUIC datagrams must come out
// byte-identical on the far side in both directions, and the process must
// shut down cleanly on a signal.

#include <arpa/inet.h>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <netinet/in.h>
#include <random>
#include <string>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

namespace {

int failures = 0;

void expect(bool ok, const char* what) {
  std::printf("%s %s\n", ok ? "ok  " : "FAIL", what);
  if (!ok) {
    ++failures;
  }
}

int bind_ephemeral(sockaddr_in& out) {
  const int fd = socket(AF_INET, SOCK_DGRAM, 0);
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  sa.sin_port = 0;
  if (bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
    return -1;
  }
  socklen_t len = sizeof(out);
  getsockname(fd, reinterpret_cast<sockaddr*>(&out), &len);
  return fd;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: proxy_loopback <path-to-quicpep>\n");
    return 1;
  }

  // the far "server" socket; its port becomes the forward target
  sockaddr_in server_sa{};
  const int server_fd = bind_ephemeral(server_sa);
  if (server_fd < 0) {
    std::fprintf(stderr, "loopback sockets unavailable\n");
    return 1;
  }
  // reserve a listen port by binding and releasing it
  sockaddr_in listen_sa{};
  const int tmp_fd = bind_ephemeral(listen_sa);
  close(tmp_fd);

  char listen_arg[64];
  char forward_arg[64];
  std::snprintf(listen_arg, sizeof(listen_arg), "127.0.0.1:%u",
                ntohs(listen_sa.sin_port));
  std::snprintf(forward_arg, sizeof(forward_arg), "127.0.0.1:%u",
                ntohs(server_sa.sin_port));

  const pid_t pid = fork();
  if (pid == 0) {
    execl(argv[1], argv[1], "proxy", "--listen", listen_arg, "--forward",
          forward_arg, "--stats-interval", "1", "--max-runtime-ms", "30000",
          static_cast<char*>(nullptr));
    _exit(127);
  }
  usleep(300'000);  // give it time to bind

  const int client_fd = socket(AF_INET, SOCK_DGRAM, 0);
  timeval tv{2, 0};
  setsockopt(client_fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  setsockopt(server_fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  sockaddr_in proxy_sa{};
  proxy_sa.sin_family = AF_INET;
  proxy_sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  proxy_sa.sin_port = listen_sa.sin_port;

  std::mt19937_64 rng(4242);
  bool forward_ok = true;
  bool reverse_ok = true;
  sockaddr_in reply_to{};
  for (int i = 0; i < 50 && forward_ok; ++i) {
    std::vector<std::uint8_t> msg(1 + rng() % 1200);
    for (auto& b : msg) {
      b = static_cast<std::uint8_t>(rng());
    }
    if (msg.size() >= 5) {
      msg[1] = 0xee;  // never QUIC v1
    }
    sendto(client_fd, msg.data(), msg.size(), 0,
           reinterpret_cast<sockaddr*>(&proxy_sa), sizeof(proxy_sa));
    std::vector<std::uint8_t> got(2048);
    socklen_t len = sizeof(reply_to);
    const ssize_t n = recvfrom(server_fd, got.data(), got.size(), 0,
                               reinterpret_cast<sockaddr*>(&reply_to), &len);
    forward_ok = n == static_cast<ssize_t>(msg.size()) &&
                 std::memcmp(got.data(), msg.data(), msg.size()) == 0;

    // reverse direction: server replies through the proxy
    if (forward_ok) {
      std::vector<std::uint8_t> reply(1 + rng() % 600);
      for (auto& b : reply) {
        b = static_cast<std::uint8_t>(rng());
      }
      if (reply.size() >= 5) {
        reply[1] = 0xee;
      }
      sendto(server_fd, reply.data(), reply.size(), 0,
             reinterpret_cast<sockaddr*>(&reply_to), len);
      std::vector<std::uint8_t> back(2048);
      const ssize_t m = recv(client_fd, back.data(), back.size(), 0);
      reverse_ok = m == static_cast<ssize_t>(reply.size()) &&
                   std::memcmp(back.data(), reply.data(), reply.size()) == 0;
      if (!reverse_ok) {
        break;
      }
    }
  }
  expect(forward_ok, "non-QUIC datagrams pass through byte-identically");
  expect(reverse_ok, "reply-direction datagrams return byte-identically");

  kill(pid, SIGTERM);
  int status = 0;
  waitpid(pid, &status, 0);
  expect(WIFEXITED(status) && WEXITSTATUS(status) == 0,
         "proxy exits 0 on SIGTERM");

  // a second instance on the same busy port must exit 3
  const int hold_fd = socket(AF_INET, SOCK_DGRAM, 0);
  bind(hold_fd, reinterpret_cast<sockaddr*>(&listen_sa), sizeof(listen_sa));
  const pid_t pid2 = fork();
  if (pid2 == 0) {
    execl(argv[1], argv[1], "proxy", "--listen", listen_arg, "--forward",
          forward_arg, static_cast<char*>(nullptr));
    _exit(127);
  }
  waitpid(pid2, &status, 0);
  expect(WIFEXITED(status) && WEXITSTATUS(status) == 3,
         "proxy exits 3 when the listen address is unavailable");

  close(hold_fd);
  close(client_fd);
  close(server_fd);
  return failures == 0 ? 0 : 1;
}
