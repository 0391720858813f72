#include "quicpep/proxy.hpp"

#include <arpa/inet.h>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <map>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>
#include <vector>

#include "quicpep/observer.hpp"

namespace quicpep {

namespace {

volatile std::sig_atomic_t g_stop = 0;

void stop_handler(int) { g_stop = 1; }

TimeUs monotonic_now() {
  timespec ts{};
  clock_gettime(CLOCK_MONOTONIC, &ts);
  return static_cast<TimeUs>(ts.tv_sec) * kMicrosPerSec + ts.tv_nsec / 1000;
}

sockaddr_in to_sockaddr(const Endpoint& e) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = htonl(e.addr);
  sa.sin_port = htons(e.port);
  return sa;
}

Endpoint from_sockaddr(const sockaddr_in& sa) {
  return Endpoint{ntohl(sa.sin_addr.s_addr), ntohs(sa.sin_port)};
}

class UdpEchoProbeDriver : public ProbeDriver {
 public:
  UdpEchoProbeDriver(int fd, std::uint16_t echo_port)
      : fd_(fd), echo_port_(echo_port) {}

  bool request(const Endpoint& target, std::uint64_t token) override {
    if (fd_ < 0 || echo_port_ == 0) {
      return false;
    }
    std::uint8_t buf[8];
    for (int i = 0; i < 8; ++i) {
      buf[i] = static_cast<std::uint8_t>(token >> (8 * (7 - i)));
    }
    sockaddr_in sa = to_sockaddr(Endpoint{target.addr, echo_port_});
    sendto(fd_, buf, sizeof(buf), 0, reinterpret_cast<sockaddr*>(&sa),
           sizeof(sa));
    sent_[token] = monotonic_now();
    return true;
  }

  // Returns the (token, rtt) of a just-received echo, if it correlates.
  bool on_reply(const std::uint8_t* buf, std::size_t len, std::uint64_t& token,
                DurUs& rtt) {
    if (len < 8) {
      return false;
    }
    std::uint64_t t = 0;
    for (int i = 0; i < 8; ++i) {
      t = (t << 8) | buf[i];
    }
    auto it = sent_.find(t);
    if (it == sent_.end()) {
      return false;
    }
    token = t;
    rtt = monotonic_now() - it->second;
    sent_.erase(it);
    return true;
  }

 private:
  int fd_;
  std::uint16_t echo_port_;
  std::map<std::uint64_t, TimeUs> sent_;
};

class UdpProxyHost : public EngineHost {
 public:
  UdpProxyHost(int listen_fd, Endpoint listen, Endpoint forward)
      : listen_fd_(listen_fd), listen_(listen), forward_(forward) {}

  void send(std::span<const std::uint8_t> datagram, const Endpoint& src,
            const Endpoint& dst) override {
    if (dst == forward_) {
      // toward the upstream, over the socket owned by this client flow
      auto it = upstream_by_client_.find(src);
      if (it != upstream_by_client_.end()) {
        ::send(it->second, datagram.data(), datagram.size(), 0);
      }
      return;
    }
    sockaddr_in sa = to_sockaddr(dst);
    sendto(listen_fd_, datagram.data(), datagram.size(), 0,
           reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
  }

  void request_wakeup(TimeUs at) override { wakeup_at_ = at; }

  int upstream_for(const Endpoint& client) {
    auto it = upstream_by_client_.find(client);
    if (it != upstream_by_client_.end()) {
      return it->second;
    }
    const int fd = socket(AF_INET, SOCK_DGRAM, 0);
    if (fd < 0) {
      return -1;
    }
    sockaddr_in sa = to_sockaddr(forward_);
    if (connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
      close(fd);
      return -1;
    }
    upstream_by_client_[client] = fd;
    client_by_fd_[fd] = client;
    return fd;
  }

  const std::map<Endpoint, int>& upstreams() const {
    return upstream_by_client_;
  }
  Endpoint client_of(int fd) const { return client_by_fd_.at(fd); }
  TimeUs wakeup_at() const { return wakeup_at_; }

 private:
  int listen_fd_;
  Endpoint listen_;
  Endpoint forward_;
  std::map<Endpoint, int> upstream_by_client_;
  std::map<int, Endpoint> client_by_fd_;
  TimeUs wakeup_at_ = 0;
};

}  // namespace

int run_proxy(const ProxyOptions& opts) {
  const int listen_fd = socket(AF_INET, SOCK_DGRAM, 0);
  if (listen_fd < 0) {
    std::fprintf(stderr, "proxy: cannot create socket: %s\n", strerror(errno));
    return 3;
  }
  sockaddr_in bind_sa = to_sockaddr(opts.listen);
  if (bind(listen_fd, reinterpret_cast<sockaddr*>(&bind_sa),
           sizeof(bind_sa)) != 0) {
    std::fprintf(stderr,
                 "proxy: cannot bind %s: %s (check the address, port "
                 "availability, and privileges)\n",
                 endpoint_text(opts.listen).c_str(), strerror(errno));
    close(listen_fd);
    return 3;
  }

  int probe_fd = -1;
  if (opts.probe_echo_port != 0) {
    probe_fd = socket(AF_INET, SOCK_DGRAM, 0);
  }
  UdpEchoProbeDriver probe_driver(probe_fd, opts.probe_echo_port);
  UdpProxyHost host(listen_fd, opts.listen, opts.forward);
  Engine engine(host, &probe_driver, opts.engine);

  std::signal(SIGINT, stop_handler);
  std::signal(SIGTERM, stop_handler);

  const TimeUs start = monotonic_now();
  TimeUs next_stats = start + opts.stats_interval;
  std::vector<std::uint8_t> buf(65536);

  while (g_stop == 0) {
    const TimeUs now = monotonic_now();
    if (opts.max_runtime_ms > 0 &&
        now - start >= opts.max_runtime_ms * kMicrosPerMilli) {
      break;
    }
    TimeUs next = next_stats;
    if (host.wakeup_at() > 0) {
      next = std::min(next, host.wakeup_at());
    }
    const int timeout_ms = static_cast<int>(
        std::max<TimeUs>(1, (next - now) / kMicrosPerMilli + 1));

    std::vector<pollfd> fds;
    fds.push_back({listen_fd, POLLIN, 0});
    if (probe_fd >= 0) {
      fds.push_back({probe_fd, POLLIN, 0});
    }
    for (const auto& [client, fd] : host.upstreams()) {
      fds.push_back({fd, POLLIN, 0});
    }
    const int ready = poll(fds.data(), fds.size(), std::min(timeout_ms, 1000));
    const TimeUs t = monotonic_now();

    if (ready > 0) {
      for (const auto& pfd : fds) {
        if ((pfd.revents & POLLIN) == 0) {
          continue;
        }
        if (pfd.fd == listen_fd) {
          sockaddr_in src_sa{};
          socklen_t len = sizeof(src_sa);
          const ssize_t n =
              recvfrom(listen_fd, buf.data(), buf.size(), 0,
                       reinterpret_cast<sockaddr*>(&src_sa), &len);
          if (n > 0) {
            const Endpoint src = from_sockaddr(src_sa);
            if (host.upstream_for(src) >= 0) {
              engine.on_datagram(
                  std::span<const std::uint8_t>(buf.data(),
                                                static_cast<std::size_t>(n)),
                  src, opts.forward, t);
            }
          }
        } else if (pfd.fd == probe_fd) {
          const ssize_t n = recv(probe_fd, buf.data(), buf.size(), 0);
          std::uint64_t token = 0;
          DurUs rtt = 0;
          if (n > 0 && probe_driver.on_reply(buf.data(),
                                             static_cast<std::size_t>(n), token,
                                             rtt)) {
            engine.on_probe_result(token, rtt, t);
          }
        } else {
          const ssize_t n = recv(pfd.fd, buf.data(), buf.size(), 0);
          if (n > 0) {
            const Endpoint client = host.client_of(pfd.fd);
            engine.on_datagram(
                std::span<const std::uint8_t>(buf.data(),
                                              static_cast<std::size_t>(n)),
                opts.forward, client, t);
          }
        }
      }
    }

    if (t >= next_stats) {
      const EngineStats& s = engine.stats();
      std::printf(
          "stats t=%.1f conns=%zu datagrams=%llu forwarded=%llu "
          "retransmitted=%llu resets=%llu\n",
          static_cast<double>(t - start) / 1e6, engine.connection_count(),
          static_cast<unsigned long long>(s.datagrams),
          static_cast<unsigned long long>(s.forwarded),
          static_cast<unsigned long long>(s.retransmitted),
          static_cast<unsigned long long>(s.calibration_resets));
      std::fflush(stdout);
      next_stats = t + opts.stats_interval;
    }
    if (host.wakeup_at() > 0 && t >= host.wakeup_at()) {
      engine.on_timer(t);
    }
  }

  engine.flush(monotonic_now());
  const EngineStats& s = engine.stats();
  std::printf("stats final conns=%zu datagrams=%llu forwarded=%llu "
              "retransmitted=%llu resets=%llu\n",
              engine.connection_count(),
              static_cast<unsigned long long>(s.datagrams),
              static_cast<unsigned long long>(s.forwarded),
              static_cast<unsigned long long>(s.retransmitted),
              static_cast<unsigned long long>(s.calibration_resets));
  std::fflush(stdout);
  for (const auto& [client, fd] : host.upstreams()) {
    close(fd);
  }
  if (probe_fd >= 0) {
    close(probe_fd);
  }
  close(listen_fd);
  return 0;
}

}  // namespace quicpep
