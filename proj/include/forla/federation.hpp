#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "forla/client.hpp"
#include "forla/io.hpp"

// Synchronous federated rounds: broadcast the global shared parameters,
// let every client train a fixed number of local iterations, collect the
// student snapshots, aggregate. Decoders never travel.

namespace forla {

struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Wire layout (little-endian): magic "FORLAMSG", u32 version, u64 client_id,
// u64 round, u32 n_c, u64 architecture fingerprint, u32 payload byte length,
// payload f32s, trailing CRC-32 over everything before it.
struct ParamMessage {
    static constexpr uint32_t kVersion = 1;
    static constexpr size_t kHeaderBytes = 44;
    static constexpr size_t kOverheadBytes = kHeaderBytes + 4;

    uint64_t client_id = 0;
    uint64_t round = 0;
    uint32_t n_c = 0;
    uint64_t fingerprint = 0;
    std::vector<float> payload;

    size_t wire_size() const { return kOverheadBytes + 4 * payload.size(); }
    std::vector<uint8_t> serialize() const;
    static ParamMessage parse(std::span<const uint8_t> bytes);
};

enum class AggregatorKind { fedavg, fedprox, fedadam };

inline const char* aggregator_name(AggregatorKind k) {
    switch (k) {
        case AggregatorKind::fedavg: return "fedavg";
        case AggregatorKind::fedprox: return "fedprox";
        case AggregatorKind::fedadam: return "fedadam";
    }
    return "?";
}

struct AggregatorConfig {
    AggregatorKind kind = AggregatorKind::fedavg;
    float fedprox_mu = 1e-3f;  // client-side proximal weight
    float server_lr = 1e-2f;   // fedadam server step
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Server {
public:
    Server(AggregatorConfig cfg, uint64_t fingerprint, std::vector<float> init_params);

    uint64_t round() const { return round_; }
    const std::vector<float>& global() const { return global_; }
    uint64_t fingerprint() const { return fingerprint_; }
    const AggregatorConfig& config() const { return cfg_; }

    ParamMessage broadcast_message(uint64_t client_id) const;

    // Sample-count-weighted mean in 64-bit accumulation, messages taken in
    // ascending client-id order.
    static std::vector<float> fedavg(std::vector<ParamMessage> messages);

    // Validates fingerprints and round tags, then applies the configured
    // aggregator and advances the round counter.
    void aggregate(std::vector<ParamMessage> messages);

    void save(std::vector<uint8_t>& out) const;
    void load(io::Reader& in);

private:
    AggregatorConfig cfg_;
    uint64_t fingerprint_ = 0;
    uint64_t round_ = 0;
    std::vector<float> global_;
    std::vector<double> m_, v_;  // fedadam server moments
    uint64_t adam_step_ = 0;
};

struct CommLedger {
    struct Row {
        uint64_t round = 0;
        uint64_t client = 0;
        uint64_t uplink_bytes = 0;
        uint64_t downlink_bytes = 0;
    };
    std::vector<Row> rows;

    void add(uint64_t round, uint64_t client, uint64_t up, uint64_t down) {
        rows.push_back({round, client, up, down});
    }
    uint64_t total_uplink() const;
    uint64_t total_downlink() const;
    uint64_t completed_rounds() const;
    std::string to_csv() const;  // round, client, uplink_bytes, downlink_bytes
};

// Reference full-scale component sizes (MB) used for reporting ratios.
struct FullScaleSizes {
    double foundation_total_mb = 346.0 + 375.0 + 327.0 + 437.0;
    double adapter_mb_mlp = 56.0;
    double adapter_mb_moe = 107.0;
    double adapter_mb_afm = 158.0;
    double slot_attention_mb = 2.3;
};

struct CommReport {
    uint64_t rounds = 0;
    uint64_t uplink_bytes_per_round_per_client = 0;
    uint64_t cumulative_uplink = 0;
    uint64_t cumulative_downlink = 0;
    size_t shared_params = 0;
    size_t full_model_params = 0;  // every trainable parameter on the client
    double desk_ratio = 0;         // full_model_params / shared_params
    double full_scale_ratio = 0;   // foundation stack vs (adapter + SA) at published sizes
    // headline figures reported elsewhere; shown as unverified references
    double reference_reduction_pct = 85.2;
    double reference_reduction_x = 6.7;
    std::string render() const;
};

// shared_params / full_model_params describe one client; adapter kind picks
// the full-scale adapter size.
CommReport comm_report(const CommLedger& ledger, size_t shared_params, size_t full_model_params,
                       AdapterKind adapter_kind, const FullScaleSizes& sizes = {});

// ---------------------------------------------------------------------------
// round orchestration

class FederationRunner {
public:
    // Clients must be registered before the first round; the global model
    // starts from the given snapshot (clients share their shared-module
    // initialization, so any client's snapshot works).
    FederationRunner(AggregatorConfig cfg, std::vector<Client*> clients, size_t local_iters_per_round,
                     bool parallel_clients = false);

    // broadcast -> local training -> collect -> aggregate. A client failure
    // aborts the round; nothing is aggregated in that case.
    void run_round();
    // per-client local iteration counts (early-stopped clients pass 0 and
    // still participate in the exchange)
    void run_round(std::span<const size_t> per_client_iters);

    Server& server() { return *server_; }
    CommLedger& ledger() { return ledger_; }
    const std::vector<Client*>& clients() const { return clients_; }
    size_t local_iters() const { return local_iters_; }

private:
    std::unique_ptr<Server> server_;
    std::vector<Client*> clients_;
    size_t local_iters_;
    bool parallel_;
    CommLedger ledger_;
};

// ---------------------------------------------------------------------------
// transports

// Length-prefixed framing: u32 big-endian byte count, then the serialized
// message. CRC is verified on receipt.
class TcpConn {
public:
    TcpConn() = default;
    explicit TcpConn(int fd) : fd_(fd) {}
    TcpConn(TcpConn&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
    TcpConn& operator=(TcpConn&& other) noexcept;
    ~TcpConn();
    TcpConn(const TcpConn&) = delete;

    bool valid() const { return fd_ >= 0; }
    void send(const ParamMessage& msg);
    // arbitrary frame bytes under the same length prefix (fault injection)
    void send_frame(std::span<const uint8_t> bytes);
    ParamMessage recv();

private:
    int fd_ = -1;
};

class TcpListener {
public:
    explicit TcpListener(uint16_t port = 0);  // 0 picks an ephemeral port
    ~TcpListener();
    TcpListener(const TcpListener&) = delete;

    uint16_t port() const { return port_; }
    TcpConn accept();

private:
    int fd_ = -1;
    uint16_t port_ = 0;
};

TcpConn tcp_connect(const std::string& host, uint16_t port);

// Server side of a TCP federation: accepts n_clients connections, reads one
// registration message each, then drives `rounds` rounds.
struct TcpServerResult {
    std::vector<float> global;
    CommLedger ledger;
    std::vector<std::vector<float>> global_per_round;
};
TcpServerResult serve_tcp_federation(AggregatorConfig cfg, TcpListener& listener, size_t n_clients,
                                     size_t rounds);

// Client side: register, then for each round receive the global model,
// train, and send the snapshot back.
void run_tcp_client(Client& client, const std::string& host, uint16_t port, size_t rounds,
                    size_t local_iters_per_round);

}  // namespace forla
