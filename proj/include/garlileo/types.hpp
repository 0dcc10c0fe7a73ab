#pragma once

#include "garlileo/lie.hpp"

#include <Eigen/Dense>

namespace garlileo {

inline constexpr double kGravity = 9.81;

inline Vec3 gravity_global() { return Vec3(0.0, 0.0, kGravity); }

struct ImuSample {
  double stamp = 0.0;
  Vec3 gyro = Vec3::Zero();   // rad/s
  Vec3 accel = Vec3::Zero();  // specific force, m/s^2
  Quat orient = Quat::Identity();  // AHRS orientation of the IMU
};

struct Extrinsics {
  Mat3 R_ir = Mat3::Identity();  // radar in IMU
  Vec3 t_ir = Vec3::Zero();
  Mat3 R_ib = Mat3::Identity();  // base in IMU
  Vec3 t_ib = Vec3::Zero();
};

}  // namespace garlileo
