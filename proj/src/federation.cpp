#include "forla/federation.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <thread>

namespace forla {

namespace {
constexpr std::string_view kMagic = "FORLAMSG";
}

std::vector<uint8_t> ParamMessage::serialize() const {
    std::vector<uint8_t> out;
    out.reserve(wire_size());
    io::put_bytes(out, kMagic.data(), kMagic.size());
    io::put_u32(out, kVersion);
    io::put_u64(out, client_id);
    io::put_u64(out, round);
    io::put_u32(out, n_c);
    io::put_u64(out, fingerprint);
    io::put_u32(out, uint32_t(payload.size() * 4));
    for (float v : payload) io::put_f32(out, v);
    io::put_u32(out, io::crc32(out));
    return out;
}

ParamMessage ParamMessage::parse(std::span<const uint8_t> bytes) {
    if (bytes.size() < kOverheadBytes) throw ProtocolError("message: truncated frame");
    const uint32_t computed = io::crc32(bytes.data(), bytes.size() - 4);
    io::Reader tail(bytes.data() + bytes.size() - 4, 4);
    if (tail.u32() != computed) throw ProtocolError("message: checksum mismatch");

    io::Reader r(bytes.data(), bytes.size() - 4);
    if (r.tag(kMagic.size()) != kMagic) throw ProtocolError("message: bad magic");
    const uint32_t version = r.u32();
    if (version != kVersion) throw ProtocolError("message: unsupported version " + std::to_string(version));
    ParamMessage msg;
    msg.client_id = r.u64();
    msg.round = r.u64();
    msg.n_c = r.u32();
    msg.fingerprint = r.u64();
    const uint32_t payload_bytes = r.u32();
    if (payload_bytes % 4 != 0 || r.remaining() != payload_bytes) {
        throw ProtocolError("message: payload length " + std::to_string(payload_bytes) + " does not match frame");
    }
    msg.payload.resize(payload_bytes / 4);
    for (auto& v : msg.payload) v = r.f32();
    return msg;
}

// ---------------------------------------------------------------------------
// server

Server::Server(AggregatorConfig cfg, uint64_t fingerprint, std::vector<float> init_params)
    : cfg_(cfg), fingerprint_(fingerprint), global_(std::move(init_params)) {
    m_.assign(global_.size(), 0.0);
    v_.assign(global_.size(), 0.0);
}

ParamMessage Server::broadcast_message(uint64_t client_id) const {
    ParamMessage msg;
    msg.client_id = client_id;
    msg.round = round_;
    msg.n_c = 0;
    msg.fingerprint = fingerprint_;
    msg.payload = global_;
    return msg;
}

std::vector<float> Server::fedavg(std::vector<ParamMessage> messages) {
    if (messages.empty()) throw ProtocolError("fedavg: no messages");
    std::sort(messages.begin(), messages.end(),
              [](const ParamMessage& a, const ParamMessage& b) { return a.client_id < b.client_id; });
    const size_t n = messages[0].payload.size();
    double total_weight = 0;
    for (const auto& m : messages) {
        if (m.payload.size() != n) throw ProtocolError("fedavg: payload size mismatch");
        total_weight += double(m.n_c);
    }
    if (total_weight <= 0) throw ProtocolError("fedavg: zero total weight");
    std::vector<double> acc(n, 0.0);
    for (const auto& m : messages) {
        const double w = double(m.n_c);
        for (size_t i = 0; i < n; ++i) acc[i] += w * double(m.payload[i]);
    }
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = float(acc[i] / total_weight);
    return out;
}

void Server::aggregate(std::vector<ParamMessage> messages) {
    if (messages.empty()) throw ProtocolError("aggregate: no messages");
    for (const auto& m : messages) {
        if (m.fingerprint != fingerprint_) {
            throw ProtocolError("aggregate: architecture fingerprint mismatch from client " +
                                std::to_string(m.client_id));
        }
        if (m.round != round_) {
            throw ProtocolError("aggregate: client " + std::to_string(m.client_id) + " reported round " +
                                std::to_string(m.round) + ", server at " + std::to_string(round_));
        }
        if (m.payload.size() != global_.size()) throw ProtocolError("aggregate: payload size mismatch");
    }
    std::vector<float> averaged = fedavg(std::move(messages));
    if (cfg_.kind == AggregatorKind::fedadam) {
        // server-side adaptive step on the pseudo-gradient delta = old - avg
        ++adam_step_;
        const double bc1 = 1.0 - std::pow(double(cfg_.beta1), double(adam_step_));
        const double bc2 = 1.0 - std::pow(double(cfg_.beta2), double(adam_step_));
        for (size_t i = 0; i < global_.size(); ++i) {
            const double delta = double(global_[i]) - double(averaged[i]);
            m_[i] = double(cfg_.beta1) * m_[i] + (1.0 - double(cfg_.beta1)) * delta;
            v_[i] = double(cfg_.beta2) * v_[i] + (1.0 - double(cfg_.beta2)) * delta * delta;
            const double mhat = m_[i] / bc1;
            const double vhat = v_[i] / bc2;
            global_[i] = float(double(global_[i]) - double(cfg_.server_lr) * mhat / (std::sqrt(vhat) + double(cfg_.eps)));
        }
    } else {
        global_ = std::move(averaged);  // fedprox aggregates like fedavg
    }
    ++round_;
}

void Server::save(std::vector<uint8_t>& out) const {
    io::put_u64(out, round_);
    io::put_u64(out, fingerprint_);
    io::put_u64(out, adam_step_);
    io::put_u32(out, uint32_t(global_.size()));
    for (float v : global_) io::put_f32(out, v);
    for (double v : m_) io::put_u64(out, std::bit_cast<uint64_t>(v));
    for (double v : v_) io::put_u64(out, std::bit_cast<uint64_t>(v));
}

void Server::load(io::Reader& in) {
    round_ = in.u64();
    fingerprint_ = in.u64();
    adam_step_ = in.u64();
    const uint32_t n = in.u32();
    if (n != global_.size()) throw IoError("checkpoint: global size mismatch");
    for (auto& v : global_) v = in.f32();
    for (auto& v : m_) v = std::bit_cast<double>(in.u64());
    for (auto& v : v_) v = std::bit_cast<double>(in.u64());
}

// ---------------------------------------------------------------------------
// ledger and report

uint64_t CommLedger::total_uplink() const {
    uint64_t t = 0;
    for (const auto& r : rows) t += r.uplink_bytes;
    return t;
}

uint64_t CommLedger::total_downlink() const {
    uint64_t t = 0;
    for (const auto& r : rows) t += r.downlink_bytes;
    return t;
}

uint64_t CommLedger::completed_rounds() const {
    uint64_t last = 0;
    for (const auto& r : rows) last = std::max(last, r.round);
    return last;
}

std::string CommLedger::to_csv() const {
    std::ostringstream os;
    os << "round,client,uplink_bytes,downlink_bytes\n";
    for (const auto& r : rows)
        os << r.round << "," << r.client << "," << r.uplink_bytes << "," << r.downlink_bytes << "\n";
    return os.str();
}

CommReport comm_report(const CommLedger& ledger, size_t shared_params, size_t full_model_params,
                       AdapterKind adapter_kind, const FullScaleSizes& sizes) {
    CommReport rep;
    rep.rounds = ledger.completed_rounds();
    rep.cumulative_uplink = ledger.total_uplink();
    rep.cumulative_downlink = ledger.total_downlink();
    rep.shared_params = shared_params;
    rep.full_model_params = full_model_params;
    rep.uplink_bytes_per_round_per_client = ParamMessage::kOverheadBytes + 4 * shared_params;
    rep.desk_ratio = shared_params ? double(full_model_params) / double(shared_params) : 0.0;
    double adapter_mb = sizes.adapter_mb_afm;
    if (adapter_kind == AdapterKind::mlp) adapter_mb = sizes.adapter_mb_mlp;
    if (adapter_kind == AdapterKind::moe) adapter_mb = sizes.adapter_mb_moe;
    rep.full_scale_ratio = sizes.foundation_total_mb / (adapter_mb + sizes.slot_attention_mb);
    return rep;
}

std::string CommReport::render() const {
    std::ostringstream os;
    os << "communication report\n";
    os << "  completed rounds:            " << rounds << "\n";
    os << "  uplink per client per round: " << uplink_bytes_per_round_per_client << " bytes (" << 4 * shared_params
       << " payload + " << ParamMessage::kOverheadBytes << " overhead)\n";
    os << "  cumulative uplink:           " << cumulative_uplink << " bytes\n";
    os << "  cumulative downlink:         " << cumulative_downlink << " bytes\n";
    os << "  shared params:               " << shared_params << "\n";
    os << "  full client params:          " << full_model_params << "\n";
    os << "  desk-scale exchange ratio (full model / shared blocks): " << desk_ratio << "x\n";
    os << "  full-scale reference ratio (foundation stack / adapter+slot-attention file sizes): "
       << full_scale_ratio << "x\n";
    os << "  headline reference figures (not derivable from this ledger): " << reference_reduction_pct
       << "% reduction, " << reference_reduction_x << "x\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// in-process rounds

FederationRunner::FederationRunner(AggregatorConfig cfg, std::vector<Client*> clients,
                                   size_t local_iters_per_round, bool parallel_clients)
    : clients_(std::move(clients)), local_iters_(local_iters_per_round), parallel_(parallel_clients) {
    if (clients_.empty()) throw ProtocolError("federation: no clients registered");
    std::sort(clients_.begin(), clients_.end(),
              [](const Client* a, const Client* b) { return a->client_id() < b->client_id(); });
    const uint64_t fp = clients_[0]->fingerprint();
    for (Client* c : clients_) {
        if (c->fingerprint() != fp) throw ProtocolError("federation: clients disagree on the architecture");
    }
    server_ = std::make_unique<Server>(cfg, fp, clients_[0]->snapshot_shared());
}

void FederationRunner::run_round() {
    std::vector<size_t> iters(clients_.size(), local_iters_);
    run_round(iters);
}

void FederationRunner::run_round(std::span<const size_t> per_client_iters) {
    if (per_client_iters.size() != clients_.size())
        throw ProtocolError("federation: per-client iteration list does not match the client count");
    const uint64_t round = server_->round() + 1;
    // broadcast
    for (Client* c : clients_) {
        ParamMessage down = server_->broadcast_message(c->client_id());
        c->apply_global(down.payload);
        ledger_.add(round, c->client_id(), 0, down.wire_size());
    }
    // local training between barriers; any failure aborts the round
    std::vector<ParamMessage> uplinks(clients_.size());
    auto train_one = [&](size_t idx) {
        Client* c = clients_[idx];
        for (size_t i = 0; i < per_client_iters[idx]; ++i) c->train_step();
        ParamMessage up;
        up.client_id = c->client_id();
        up.round = round - 1;  // snapshot of the model loaded at round start
        up.n_c = c->n_scenes();
        up.fingerprint = c->fingerprint();
        up.payload = c->snapshot_shared();
        uplinks[idx] = std::move(up);
    };
    if (parallel_) {
        std::vector<std::thread> threads;
        std::vector<std::exception_ptr> errors(clients_.size());
        for (size_t i = 0; i < clients_.size(); ++i) {
            threads.emplace_back([&, i]() {
                try {
                    train_one(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            });
        }
        for (auto& t : threads) t.join();
        for (size_t i = 0; i < errors.size(); ++i) {
            if (errors[i]) {
                try {
                    std::rethrow_exception(errors[i]);
                } catch (const NumericalError&) {
                    throw;  // keeps the numerical-abort exit path
                } catch (const std::exception& e) {
                    throw ProtocolError("round " + std::to_string(round) + " aborted: client " +
                                        std::to_string(clients_[i]->client_id()) + " failed: " + e.what());
                }
            }
        }
    } else {
        for (size_t i = 0; i < clients_.size(); ++i) {
            try {
                train_one(i);
            } catch (const NumericalError&) {
                throw;
            } catch (const std::exception& e) {
                throw ProtocolError("round " + std::to_string(round) + " aborted: client " +
                                    std::to_string(clients_[i]->client_id()) + " failed: " + e.what());
            }
        }
    }
    for (size_t i = 0; i < clients_.size(); ++i)
        ledger_.add(round, clients_[i]->client_id(), uplinks[i].wire_size(), 0);
    server_->aggregate(std::move(uplinks));
}

// ---------------------------------------------------------------------------
// tcp transport

TcpConn& TcpConn::operator=(TcpConn&& other) noexcept {
    if (this != &other) {
        if (fd_ >= 0) ::close(fd_);
        fd_ = other.fd_;
        other.fd_ = -1;
    }
    return *this;
}

TcpConn::~TcpConn() {
    if (fd_ >= 0) ::close(fd_);
}

namespace {

void write_all(int fd, const uint8_t* data, size_t n) {
    size_t off = 0;
    while (off < n) {
        ssize_t w = ::send(fd, data + off, n - off, 0);
        if (w <= 0) throw ProtocolError("tcp: send failed");
        off += size_t(w);
    }
}

void read_all(int fd, uint8_t* data, size_t n) {
    size_t off = 0;
    while (off < n) {
        ssize_t r = ::recv(fd, data + off, n - off, 0);
        if (r == 0) throw ProtocolError("tcp: connection closed mid-frame");
        if (r < 0) throw ProtocolError("tcp: recv failed");
        off += size_t(r);
    }
}

}  // namespace

void TcpConn::send(const ParamMessage& msg) { send_frame(msg.serialize()); }

void TcpConn::send_frame(std::span<const uint8_t> bytes) {
    uint8_t prefix[4] = {uint8_t(bytes.size() >> 24), uint8_t(bytes.size() >> 16), uint8_t(bytes.size() >> 8),
                         uint8_t(bytes.size())};
    write_all(fd_, prefix, 4);
    write_all(fd_, bytes.data(), bytes.size());
}

ParamMessage TcpConn::recv() {
    uint8_t prefix[4];
    read_all(fd_, prefix, 4);
    const uint32_t len =
        uint32_t(prefix[0]) << 24 | uint32_t(prefix[1]) << 16 | uint32_t(prefix[2]) << 8 | uint32_t(prefix[3]);
    if (len < ParamMessage::kOverheadBytes || len > (1u << 30)) {
        throw ProtocolError("tcp: implausible frame length " + std::to_string(len));
    }
    std::vector<uint8_t> bytes(len);
    read_all(fd_, bytes.data(), len);
    return ParamMessage::parse(bytes);
}

TcpListener::TcpListener(uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw ProtocolError("tcp: cannot create socket");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        ::close(fd_);
        throw ProtocolError("tcp: bind failed");
    }
    if (::listen(fd_, 16) != 0) {
        ::close(fd_);
        throw ProtocolError("tcp: listen failed");
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
}

TcpConn TcpListener::accept() {
    int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) throw ProtocolError("tcp: accept failed");
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return TcpConn(fd);
}

TcpConn tcp_connect(const std::string& host, uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw ProtocolError("tcp: cannot create socket");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        throw ProtocolError("tcp: bad address " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        ::close(fd);
        throw ProtocolError("tcp: connect to " + host + ":" + std::to_string(port) + " failed");
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return TcpConn(fd);
}

TcpServerResult serve_tcp_federation(AggregatorConfig cfg, TcpListener& listener, size_t n_clients,
                                     size_t rounds) {
    struct Registered {
        TcpConn conn;
        uint64_t client_id;
    };
    std::vector<Registered> peers;
    std::vector<ParamMessage> hellos;
    for (size_t i = 0; i < n_clients; ++i) {
        TcpConn conn = listener.accept();
        ParamMessage hello = conn.recv();
        peers.push_back({std::move(conn), hello.client_id});
        hellos.push_back(std::move(hello));
    }
    std::sort(peers.begin(), peers.end(),
              [](const Registered& a, const Registered& b) { return a.client_id < b.client_id; });
    std::sort(hellos.begin(), hellos.end(),
              [](const ParamMessage& a, const ParamMessage& b) { return a.client_id < b.client_id; });
    Server server(cfg, hellos[0].fingerprint, hellos[0].payload);

    TcpServerResult result;
    for (size_t r = 0; r < rounds; ++r) {
        const uint64_t round = server.round() + 1;
        for (auto& p : peers) {
            ParamMessage down = server.broadcast_message(p.client_id);
            p.conn.send(down);
            result.ledger.add(round, p.client_id, 0, down.wire_size());
        }
        std::vector<ParamMessage> ups;
        for (auto& p : peers) {
            ParamMessage up = p.conn.recv();
            result.ledger.add(round, p.client_id, up.wire_size(), 0);
            ups.push_back(std::move(up));
        }
        server.aggregate(std::move(ups));
        result.global_per_round.push_back(server.global());
    }
    result.global = server.global();
    return result;
}

void run_tcp_client(Client& client, const std::string& host, uint16_t port, size_t rounds,
                    size_t local_iters_per_round) {
    TcpConn conn = tcp_connect(host, port);
    ParamMessage hello;
    hello.client_id = client.client_id();
    hello.round = 0;
    hello.n_c = client.n_scenes();
    hello.fingerprint = client.fingerprint();
    hello.payload = client.snapshot_shared();
    conn.send(hello);
    for (size_t r = 0; r < rounds; ++r) {
        ParamMessage down = conn.recv();
        client.apply_global(down.payload);
        for (size_t i = 0; i < local_iters_per_round; ++i) client.train_step();
        ParamMessage up;
        up.client_id = client.client_id();
        up.round = down.round;
        up.n_c = client.n_scenes();
        up.fingerprint = client.fingerprint();
        up.payload = client.snapshot_shared();
        conn.send(up);
    }
}

}  // namespace forla
