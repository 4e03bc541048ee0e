#pragma once

#include <string>

#include <httplib.h>

#include "longrep/reward.hpp"

namespace longrep {

// Bridges to an external embedding service: POST /embed with
// {"texts": [...]} returning {"embeddings": [[...], ...]}. Any transport or
// shape problem is an error; the reward is never silently zeroed.
class HttpReportEncoder final : public ReportEncoder {
  public:
    HttpReportEncoder(const std::string& host, int port, int timeout_seconds = 10)
        : client_(host, port) {
        client_.set_connection_timeout(timeout_seconds);
        client_.set_read_timeout(timeout_seconds);
    }

    std::pair<Eigen::VectorXd, Eigen::VectorXd> embed_pair(const std::string& a,
                                                           const std::string& b) override {
        nlohmann::json body;
        body["texts"] = {a, b};
        httplib::Result res = client_.Post("/embed", body.dump(), "application/json");
        if (!res)
            throw IoError("embedding service unreachable: " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw IoError("embedding service returned status " + std::to_string(res->status));
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("embedding service sent invalid JSON: ") + e.what());
        }
        if (!j.contains("embeddings") || !j["embeddings"].is_array() ||
            j["embeddings"].size() != 2)
            throw IoError("embedding service response must hold exactly 2 embeddings");
        auto to_vec = [](const nlohmann::json& arr) {
            if (!arr.is_array() || arr.empty())
                throw IoError("embedding service sent an empty embedding");
            Eigen::VectorXd v(arr.size());
            for (size_t i = 0; i < arr.size(); ++i) {
                if (!arr[i].is_number()) throw IoError("embedding entry is not a number");
                v(i) = arr[i].get<double>();
                if (!std::isfinite(v(i))) throw IoError("embedding entry is not finite");
            }
            return v;
        };
        Eigen::VectorXd va = to_vec(j["embeddings"][0]);
        Eigen::VectorXd vb = to_vec(j["embeddings"][1]);
        if (va.size() != vb.size())
            throw IoError("embedding service sent mismatched dimensions");
        return {va, vb};
    }

  private:
    httplib::Client client_;
};

}  // namespace longrep
