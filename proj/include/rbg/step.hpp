#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace rbg {

/// Raised when a batch produces a non-finite loss. `what()` carries a JSON
/// dump of the batch.
class NonFiniteLoss : public std::runtime_error {
  public:
    explicit NonFiniteLoss(const nlohmann::json& dump) : std::runtime_error("non-finite loss: " + dump.dump()) {}
};

struct BatchItem {
    std::string id;
    Example example;
    std::vector<int> target;  // BOS ... EOS
};

/// One optimizer update on the mean sequence loss of a batch. Pre-training and
/// fine-tuning both go through here. Returns the mean loss.
template <typename T>
double batch_step(RbgModel<T>& model, AdamW<T>& opt, std::span<const BatchItem> batch, const RunOptions& run,
                  ForwardStats* stats = nullptr)
{
    auto grads = model.params().zero_grads();
    const T weight = T(1) / static_cast<T>(batch.size());
    double total = 0;
    std::vector<double> losses;
    for (const auto& item : batch) {
        const T loss = loss_and_grad(model, item.example, item.target, run, grads, weight, stats);
        losses.push_back(static_cast<double>(loss));
        total += static_cast<double>(loss);
    }
    const double mean = total / static_cast<double>(batch.size());
    if (!std::isfinite(mean)) {
        nlohmann::json dump = nlohmann::json::array();
        for (std::size_t i = 0; i < batch.size(); ++i) {
            std::vector<std::string> docs;
            for (const auto* d : batch[i].example.docs) {
                docs.push_back(d->doc_id);
            }
            dump.push_back({{"id", batch[i].id},
                            {"loss", std::isfinite(losses[i]) ? nlohmann::json(losses[i]) : nlohmann::json("nan")},
                            {"docs", docs},
                            {"target_length", batch[i].target.size()}});
        }
        throw NonFiniteLoss(dump);
    }
    opt.step(model.params(), grads);
    return mean;
}

inline std::vector<int> answer_target(const Vocabulary& v, const std::string& text)
{
    std::vector<int> t{Vocabulary::bos};
    const auto body = v.tokenize(text);
    t.insert(t.end(), body.begin(), body.end());
    t.push_back(Vocabulary::eos);
    return t;
}

}  // namespace rbg
