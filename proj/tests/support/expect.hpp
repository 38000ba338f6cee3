#pragma once

#include <gtest/gtest.h>

#include "collab/error.hpp"

template <typename Fn>
void expect_error(collab::ErrorKind kind, Fn&& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << collab::to_string(kind) << " error";
  } catch (const collab::Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}
