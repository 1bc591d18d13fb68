#include "doctest.h"

#include <string>

#include "vatt/errors.hpp"
#include "vatt/gradcheck_suite.hpp"

using namespace vatt;

TEST_CASE("suite passes every op at the default tolerance") {
    const GradcheckReport r = run_gradcheck_suite(12, 1e-4, 3);
    CHECK(r.all_pass);
    for (const GradcheckEntry& e : r.entries) {
        CAPTURE(e.op);
        CHECK(e.pass);
        CHECK(e.max_rel_err <= 1e-4);
    }
}

TEST_CASE("suite covers every op and the end-to-end forward") {
    const GradcheckReport r = run_gradcheck_suite(3, 1e-4, 1);
    const char* expected[] = {
        "matmul",      "conv2d",  "global_avg_pool", "global_max_pool",
        "channel_pool", "softmax", "relu",            "sigmoid",
        "mul_broadcast", "add",   "add_channel_bias", "stack",
        "reshape",     "scale",   "sum_all",          "mean_all",
        "dot",         "bce_with_logits_mean",        "va_forward",
    };
    REQUIRE(r.entries.size() == sizeof(expected) / sizeof(expected[0]));
    for (std::size_t i = 0; i < r.entries.size(); ++i) {
        CHECK(r.entries[i].op == expected[i]);
    }
}

TEST_CASE("report text is a pure function of seed, tol, and points") {
    const std::string a = gradcheck_report_text(run_gradcheck_suite(7, 1e-4, 2));
    const std::string b = gradcheck_report_text(run_gradcheck_suite(7, 1e-4, 2));
    CHECK(a == b);
    CHECK(a.find("va_forward") != std::string::npos);
    CHECK(a.find("result: PASS") != std::string::npos);
}

TEST_CASE("unreachable tolerance fails the nonlinear ops") {
    const GradcheckReport r = run_gradcheck_suite(12, 1e-12, 2);
    CHECK_FALSE(r.all_pass);
    bool sigmoid_failed = false;
    for (const GradcheckEntry& e : r.entries) {
        if (e.op == "sigmoid") {
            sigmoid_failed = !e.pass;
        }
    }
    CHECK(sigmoid_failed);
    const std::string text = gradcheck_report_text(r);
    CHECK(text.find("FAIL") != std::string::npos);
}

TEST_CASE("invalid suite parameters are rejected") {
    CHECK_THROWS_AS(run_gradcheck_suite(1, 1e-4, 0), ConfigError);
    CHECK_THROWS_AS(run_gradcheck_suite(1, 0.0, 5), ConfigError);
    CHECK_THROWS_AS(run_gradcheck_suite(1, -1.0, 5), ConfigError);
}
