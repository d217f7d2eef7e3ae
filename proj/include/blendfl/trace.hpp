#pragma once

#include <algorithm>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "blendfl/bundle.hpp"
#include "blendfl/data.hpp"
#include "blendfl/errors.hpp"

namespace blendfl {

/// What happened at one point of a protocol run. Local kinds never cross a process boundary.
enum class MessageKind {
  LocalPartial,       // local
  FeaturesToServer,   // client -> vertical server
  GradientsToClient,  // vertical server -> client
  LocalPaired,        // local
  WeightsToServer,    // client -> aggregation server
  GlobalsToClient,    // aggregation server -> client
  LocalInference,     // local
};

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::LocalPartial: return "partial";
    case MessageKind::FeaturesToServer: return "features_to_server";
    case MessageKind::GradientsToClient: return "gradients_to_client";
    case MessageKind::LocalPaired: return "paired";
    case MessageKind::WeightsToServer: return "weights_to_server";
    case MessageKind::GlobalsToClient: return "globals_to_client";
    case MessageKind::LocalInference: return "inference";
  }
  return "?";
}

inline bool is_server_message(MessageKind k) {
  return k == MessageKind::FeaturesToServer || k == MessageKind::GradientsToClient ||
         k == MessageKind::WeightsToServer || k == MessageKind::GlobalsToClient;
}

struct TraceEvent {
  int round = 0;
  int local_epoch = 0;
  int step = 0;
  MessageKind kind = MessageKind::LocalPartial;
  ClientId client = -1;  // -1 for the server side
  std::optional<Modality> modality;
  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

/// Append-only log of protocol events. Recording is thread-safe.
class ProtocolTrace {
 public:
  ProtocolTrace() = default;
  ProtocolTrace(const ProtocolTrace& other) : events_(other.events()) {}
  ProtocolTrace& operator=(const ProtocolTrace& other) {
    if (this != &other) {
      auto copy = other.events();
      std::lock_guard lock(mu_);
      events_ = std::move(copy);
    }
    return *this;
  }

  void record(TraceEvent e) {
    std::lock_guard lock(mu_);
    events_.push_back(e);
  }

  std::vector<TraceEvent> events() const {
    std::lock_guard lock(mu_);
    return events_;
  }

  std::size_t server_messages() const {
    std::lock_guard lock(mu_);
    return static_cast<std::size_t>(
        std::count_if(events_.begin(), events_.end(), [](const TraceEvent& e) { return is_server_message(e.kind); }));
  }

  /// Kinds of one round in order of first appearance.
  std::vector<MessageKind> phase_sequence(int round) const {
    std::vector<MessageKind> out;
    for (const auto& e : events())
      if (e.round == round && std::find(out.begin(), out.end(), e.kind) == out.end()) out.push_back(e.kind);
    return out;
  }

  /// Throws ProtocolError unless round `round` obeys the phase order: within each local epoch
  /// partial < vertical < paired, within each vertical step every feature upload precedes
  /// every gradient reply, and aggregation traffic follows all local work.
  void check_phase_order(int round) const {
    const auto evs = events();
    auto rank = [](MessageKind k) {
      switch (k) {
        case MessageKind::LocalPartial: return 0;
        case MessageKind::FeaturesToServer:
        case MessageKind::GradientsToClient: return 1;
        case MessageKind::LocalPaired: return 2;
        case MessageKind::WeightsToServer: return 3;
        case MessageKind::GlobalsToClient: return 4;
        case MessageKind::LocalInference: return 5;
      }
      return 5;
    };
    int last_epoch = -1, last_rank = -1;
    std::map<int, bool> step_has_grad;
    for (const auto& e : evs) {
      if (e.round != round) continue;
      const int r = rank(e.kind);
      const std::string where = "round " + std::to_string(round) + ": " + to_string(e.kind);
      if (r >= 3) {
        if (r < last_rank) throw ProtocolError(where + " out of order");
        last_rank = r;
        last_epoch = 1 << 30;
        continue;
      }
      if (e.local_epoch < last_epoch) throw ProtocolError(where + " after aggregation or from an earlier local epoch");
      if (e.local_epoch > last_epoch) {
        last_epoch = e.local_epoch;
        last_rank = -1;
        step_has_grad.clear();
      }
      if (r < last_rank) throw ProtocolError(where + " out of order");
      last_rank = r;
      if (e.kind == MessageKind::GradientsToClient) step_has_grad[e.step] = true;
      if (e.kind == MessageKind::FeaturesToServer && step_has_grad[e.step])
        throw ProtocolError(where + " after a gradient reply in step " + std::to_string(e.step));
    }
  }

 private:
  mutable std::mutex mu_;
  std::vector<TraceEvent> events_;
};

}  // namespace blendfl
